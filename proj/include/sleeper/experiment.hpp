#pragma once

// Experiment orchestration: a strict declarative config, presets, and the
// craft -> evaluate -> defend -> sweep pipeline with on-disk artifacts.
// Every run directory carries a manifest with the resolved config and a
// content hash of the inputs.

#include <sleeper/defenses.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace sleeper {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A required input path that does not exist.
class MissingInput : public std::runtime_error {
public:
    explicit MissingInput(const std::filesystem::path& p)
        : std::runtime_error("input not found: " + p.string()), path(p) {}
    std::filesystem::path path;
};

class FingerprintMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config

struct DatasetSpec {
    std::string kind = "synthetic"; // synthetic | records | cifar10
    std::string path;               // records / cifar10 directory
    std::size_t num_classes = 4;
    std::size_t per_class = 250;
    std::size_t val_per_class = 100;
    std::size_t side = 16;
    std::size_t channels = 3;
    std::uint64_t seed = 7;
    SyntheticStyle style;
};

struct PatchSpec {
    std::size_t size = 4;
    double contrast = 0.7;
    std::uint64_t seed = 99;
    std::string placement = "random"; // random | bottom-right | fixed
    std::size_t row = 0, col = 0;     // for "fixed"
};

struct EvalSpec {
    std::size_t victims = 3;
    bool resample_placement = false;
    std::size_t cosine_adv_samples = 0;
};

struct DefenseSpec {
    std::optional<double> remove_fraction;
    std::size_t strip_overlays = 20;
    double strip_percentile = 0.01;
};

struct ExperimentConfig {
    std::string preset = "desk-synthetic";
    std::uint64_t seed = 0;
    std::string output_dir = "runs/desk-synthetic";
    DatasetSpec dataset;
    ArchSpec surrogate_arch;
    ArchSpec victim_arch;
    TrainConfig surrogate_train;
    TrainConfig victim_train;
    AttackConfig attack;
    std::optional<double> budget_fraction = 0.01; // overrides attack.budget when set
    PatchSpec patch;
    EvalSpec eval;
    DefenseSpec defense;
};

inline ExperimentConfig preset_desk_synthetic() {
    ExperimentConfig c;
    c.preset = "desk-synthetic";
    c.output_dir = "runs/desk-synthetic";
    c.surrogate_train = TrainConfig::desk();
    c.victim_train = TrainConfig::desk();
    c.attack.steps = 100;
    c.attack.retrain_factor = 2;
    c.attack.ensemble_size = 1;
    c.attack.eps = 16.0 / 255.0;
    return c;
}

inline ExperimentConfig preset_paper_cifar10() {
    ExperimentConfig c;
    c.preset = "paper-cifar10";
    c.output_dir = "runs/paper-cifar10";
    c.dataset.kind = "cifar10";
    c.dataset.path = "data/cifar-10-batches-bin";
    c.dataset.num_classes = 10;
    c.dataset.side = 32;
    c.surrogate_arch.name = "convnet-m";
    c.victim_arch.name = "convnet-m";
    c.surrogate_train = TrainConfig::paper_cifar10();
    c.victim_train = TrainConfig::paper_cifar10_victim();
    c.attack.steps = 250;
    c.attack.retrain_factor = 4;
    c.attack.eps = 16.0 / 255.0;
    c.attack.adv_sample_count = 256;
    c.attack.craft_batch = 128;
    c.attack.augment = {4, 0.5};
    c.patch.size = 8;
    c.patch.contrast = 1.0;
    return c;
}

inline ExperimentConfig preset(const std::string& name) {
    if (name == "desk-synthetic") return preset_desk_synthetic();
    if (name == "paper-cifar10") return preset_paper_cifar10();
    throw ConfigError("unknown preset '" + name + "' (expected desk-synthetic or paper-cifar10)");
}

namespace detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok |= key == a;
        if (!ok) throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
    }
}

inline void read_style(const json& j, SyntheticStyle& s, const std::string& w) {
    check_keys(j, w, {"contrast_lo", "contrast_hi", "shape_lo", "shape_hi", "noise", "background_lo", "background_hi"});
    read(j, "contrast_lo", s.contrast_lo, w);
    read(j, "contrast_hi", s.contrast_hi, w);
    read(j, "shape_lo", s.shape_lo, w);
    read(j, "shape_hi", s.shape_hi, w);
    read(j, "noise", s.noise, w);
    read(j, "background_lo", s.background_lo, w);
    read(j, "background_hi", s.background_hi, w);
}

inline json style_json(const SyntheticStyle& s) {
    return {{"contrast_lo", s.contrast_lo}, {"contrast_hi", s.contrast_hi},     {"shape_lo", s.shape_lo},
            {"shape_hi", s.shape_hi},       {"noise", s.noise},                 {"background_lo", s.background_lo},
            {"background_hi", s.background_hi}};
}

inline void read_arch(const json& j, ArchSpec& a, const std::string& w) {
    check_keys(j, w, {"name", "base_width", "mean", "stddev"});
    read(j, "name", a.name, w);
    read(j, "base_width", a.base_width, w);
    read(j, "mean", a.mean, w);
    read(j, "stddev", a.stddev, w);
}

inline json arch_json(const ArchSpec& a) {
    return {{"name", a.name}, {"base_width", a.base_width}, {"mean", a.mean}, {"stddev", a.stddev}};
}

inline void read_train(const json& j, TrainConfig& t, const std::string& w) {
    check_keys(j, w,
               {"epochs", "batch_size", "lr0", "lr_drop_epochs", "lr_drop_factor", "momentum", "nesterov",
                "weight_decay", "augment", "augment_pad", "flip_prob"});
    read(j, "epochs", t.epochs, w);
    read(j, "batch_size", t.batch_size, w);
    read(j, "lr0", t.lr0, w);
    read(j, "lr_drop_epochs", t.lr_drop_epochs, w);
    read(j, "lr_drop_factor", t.lr_drop_factor, w);
    read(j, "momentum", t.momentum, w);
    read(j, "nesterov", t.nesterov, w);
    read(j, "weight_decay", t.weight_decay, w);
    read(j, "augment", t.augment, w);
    read(j, "augment_pad", t.augment_params.pad, w);
    read(j, "flip_prob", t.augment_params.flip_prob, w);
}

inline json train_json(const TrainConfig& t) {
    json j = t;
    j.erase("seed"); // derived from the top-level seed
    return j;
}

inline void read_attack(const json& j, ExperimentConfig& c, const std::string& w) {
    check_keys(j, w,
               {"source_class", "target_class", "budget", "budget_fraction", "eps", "eps_255", "steps",
                "retrain_factor", "ensemble_size", "adv_sample_count", "selection", "patch_sampling",
                "adv_refresh_every_step", "retrain_from_scratch", "differentiable_augment", "augment_pad",
                "flip_prob", "craft_batch", "adam"});
    auto& a = c.attack;
    read(j, "source_class", a.source_class, w);
    read(j, "target_class", a.target_class, w);
    if (j.contains("budget")) {
        read(j, "budget", a.budget, w);
        c.budget_fraction.reset();
    }
    if (j.contains("budget_fraction")) {
        if (j["budget_fraction"].is_null()) {
            c.budget_fraction.reset();
        } else {
            double f = 0.0;
            read(j, "budget_fraction", f, w);
            c.budget_fraction = f;
        }
    }
    if (j.contains("eps") && j.contains("eps_255")) throw ConfigError(w + ": give eps or eps_255, not both");
    read(j, "eps", a.eps, w);
    if (j.contains("eps_255")) {
        double e = 0.0;
        read(j, "eps_255", e, w);
        a.eps = e / 255.0;
    }
    read(j, "steps", a.steps, w);
    read(j, "retrain_factor", a.retrain_factor, w);
    read(j, "ensemble_size", a.ensemble_size, w);
    read(j, "adv_sample_count", a.adv_sample_count, w);
    if (j.contains("selection")) {
        try {
            a.selection = selection_from_string(j["selection"].get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError(w + ".selection: " + e.what());
        }
    }
    if (j.contains("patch_sampling")) {
        const auto s = j["patch_sampling"].get<std::string>();
        if (s == "fresh-per-refresh") a.patch_sampling = PatchSampling::fresh_per_refresh;
        else if (s == "fixed-per-source") a.patch_sampling = PatchSampling::fixed_per_source;
        else throw ConfigError(w + ".patch_sampling: unknown value '" + s + "'");
    }
    read(j, "adv_refresh_every_step", a.adv_refresh_every_step, w);
    read(j, "retrain_from_scratch", a.retrain_from_scratch, w);
    read(j, "differentiable_augment", a.differentiable_augment, w);
    read(j, "augment_pad", a.augment.pad, w);
    read(j, "flip_prob", a.augment.flip_prob, w);
    read(j, "craft_batch", a.craft_batch, w);
    if (j.contains("adam")) {
        const json& d = j["adam"];
        const std::string wa = w + ".adam";
        check_keys(d, wa, {"lr0", "beta1", "beta2", "eps", "decay_factor", "decay_points"});
        read(d, "lr0", a.adam.lr0, wa);
        read(d, "beta1", a.adam.beta1, wa);
        read(d, "beta2", a.adam.beta2, wa);
        read(d, "eps", a.adam.eps, wa);
        read(d, "decay_factor", a.adam.decay_factor, wa);
        read(d, "decay_points", a.adam.decay_points, wa);
    }
}

} // namespace detail

/// Overlays `j` on `base`; any key the schema does not know is an error.
inline ExperimentConfig apply_config(ExperimentConfig c, const json& j) {
    using namespace detail;
    check_keys(j, "", {"preset", "seed", "output_dir", "dataset", "surrogate", "victim", "surrogate_train",
                       "victim_train", "attack", "patch", "eval", "defense"});
    read(j, "seed", c.seed, "");
    read(j, "output_dir", c.output_dir, "");
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        check_keys(d, "dataset",
                   {"kind", "path", "num_classes", "per_class", "val_per_class", "side", "channels", "seed", "style"});
        auto& s = c.dataset;
        read(d, "kind", s.kind, "dataset");
        read(d, "path", s.path, "dataset");
        read(d, "num_classes", s.num_classes, "dataset");
        read(d, "per_class", s.per_class, "dataset");
        read(d, "val_per_class", s.val_per_class, "dataset");
        read(d, "side", s.side, "dataset");
        read(d, "channels", s.channels, "dataset");
        read(d, "seed", s.seed, "dataset");
        if (d.contains("style")) read_style(d["style"], s.style, "dataset.style");
    }
    if (j.contains("surrogate")) read_arch(j["surrogate"], c.surrogate_arch, "surrogate");
    if (j.contains("victim")) read_arch(j["victim"], c.victim_arch, "victim");
    if (j.contains("surrogate_train")) read_train(j["surrogate_train"], c.surrogate_train, "surrogate_train");
    if (j.contains("victim_train")) read_train(j["victim_train"], c.victim_train, "victim_train");
    if (j.contains("attack")) read_attack(j["attack"], c, "attack");
    if (j.contains("patch")) {
        const json& p = j["patch"];
        check_keys(p, "patch", {"size", "contrast", "seed", "placement", "row", "col"});
        read(p, "size", c.patch.size, "patch");
        read(p, "contrast", c.patch.contrast, "patch");
        read(p, "seed", c.patch.seed, "patch");
        read(p, "placement", c.patch.placement, "patch");
        read(p, "row", c.patch.row, "patch");
        read(p, "col", c.patch.col, "patch");
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        check_keys(e, "eval", {"victims", "resample_placement", "cosine_adv_samples"});
        read(e, "victims", c.eval.victims, "eval");
        read(e, "resample_placement", c.eval.resample_placement, "eval");
        read(e, "cosine_adv_samples", c.eval.cosine_adv_samples, "eval");
    }
    if (j.contains("defense")) {
        const json& d = j["defense"];
        check_keys(d, "defense", {"remove_fraction", "strip_overlays", "strip_percentile"});
        if (d.contains("remove_fraction")) {
            if (d["remove_fraction"].is_null()) c.defense.remove_fraction.reset();
            else c.defense.remove_fraction = d["remove_fraction"].get<double>();
        }
        read(d, "strip_overlays", c.defense.strip_overlays, "defense");
        read(d, "strip_percentile", c.defense.strip_percentile, "defense");
    }
    return c;
}

/// Config from a JSON document: its "preset" (default desk-synthetic) with the
/// remaining keys overlaid.
inline ExperimentConfig config_from_json(const json& j) {
    const std::string name = j.contains("preset") ? j["preset"].get<std::string>() : "desk-synthetic";
    return apply_config(preset(name), j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingInput(path);
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline json to_json(const ExperimentConfig& c) {
    using namespace detail;
    const auto& a = c.attack;
    json j;
    j["preset"] = c.preset;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["dataset"] = {{"kind", c.dataset.kind},
                    {"path", c.dataset.path},
                    {"num_classes", c.dataset.num_classes},
                    {"per_class", c.dataset.per_class},
                    {"val_per_class", c.dataset.val_per_class},
                    {"side", c.dataset.side},
                    {"channels", c.dataset.channels},
                    {"seed", c.dataset.seed},
                    {"style", style_json(c.dataset.style)}};
    j["surrogate"] = arch_json(c.surrogate_arch);
    j["victim"] = arch_json(c.victim_arch);
    j["surrogate_train"] = train_json(c.surrogate_train);
    j["victim_train"] = train_json(c.victim_train);
    j["attack"] = {{"source_class", a.source_class},
                   {"target_class", a.target_class},
                   {"eps", a.eps},
                   {"steps", a.steps},
                   {"retrain_factor", a.retrain_factor},
                   {"ensemble_size", a.ensemble_size},
                   {"adv_sample_count", a.adv_sample_count},
                   {"selection", to_string(a.selection)},
                   {"patch_sampling", a.patch_sampling == PatchSampling::fixed_per_source ? "fixed-per-source"
                                                                                          : "fresh-per-refresh"},
                   {"adv_refresh_every_step", a.adv_refresh_every_step},
                   {"retrain_from_scratch", a.retrain_from_scratch},
                   {"differentiable_augment", a.differentiable_augment},
                   {"augment_pad", a.augment.pad},
                   {"flip_prob", a.augment.flip_prob},
                   {"craft_batch", a.craft_batch},
                   {"adam",
                    {{"lr0", a.adam.lr0},
                     {"beta1", a.adam.beta1},
                     {"beta2", a.adam.beta2},
                     {"eps", a.adam.eps},
                     {"decay_factor", a.adam.decay_factor},
                     {"decay_points", a.adam.decay_points}}}};
    if (c.budget_fraction) j["attack"]["budget_fraction"] = *c.budget_fraction;
    else j["attack"]["budget"] = a.budget;
    j["patch"] = {{"size", c.patch.size},           {"contrast", c.patch.contrast}, {"seed", c.patch.seed},
                  {"placement", c.patch.placement}, {"row", c.patch.row},           {"col", c.patch.col}};
    j["eval"] = {{"victims", c.eval.victims},
                 {"resample_placement", c.eval.resample_placement},
                 {"cosine_adv_samples", c.eval.cosine_adv_samples}};
    j["defense"] = {{"remove_fraction", c.defense.remove_fraction ? json(*c.defense.remove_fraction) : json(nullptr)},
                    {"strip_overlays", c.defense.strip_overlays},
                    {"strip_percentile", c.defense.strip_percentile}};
    return j;
}

// ---------------------------------------------------------------------------
// Resolution: everything random is derived from the top-level seed.

struct Resolved {
    ExperimentConfig config;
    DatasetPair data;
    AttackConfig attack; // budget, patch and seed filled in
    ArchSpec surrogate_arch, victim_arch;
    TrainConfig surrogate_train;
    VictimSetup victim;
    EvalConfig eval;
    std::vector<std::uint64_t> victim_seeds;
    std::string input_hash;
};

inline DatasetPair load_data(const DatasetSpec& s) {
    if (s.kind == "synthetic")
        return gen_synthetic(s.num_classes, s.per_class, s.side, s.seed, s.val_per_class, s.channels, s.style);
    if (s.kind != "records" && s.kind != "cifar10")
        throw ConfigError("dataset.kind must be synthetic, records or cifar10, got '" + s.kind + "'");
    const std::filesystem::path dir(s.path);
    if (s.path.empty() || !std::filesystem::is_directory(dir)) throw MissingInput(dir);
    return s.kind == "records" ? load_dataset_dir(dir) : load_cifar10(dir);
}

inline TriggerPatch make_patch(const PatchSpec& p, const Shape& image) {
    Placement pl = RandomPlacement{};
    if (p.placement == "bottom-right") pl = TriggerPatch::bottom_right(image, p.size, p.size);
    else if (p.placement == "fixed") pl = FixedPlacement{p.row, p.col};
    else if (p.placement != "random")
        throw ConfigError("patch.placement must be random, bottom-right or fixed, got '" + p.placement + "'");
    if (p.size == 0 || p.size > image.at(1) || p.size > image.at(2))
        throw ConfigError("patch.size " + std::to_string(p.size) + " does not fit image " + shape_str(image));
    try {
        return TriggerPatch::colorful(image.at(0), p.size, p.size, p.seed, pl, p.contrast);
    } catch (const DataError& e) {
        throw ConfigError(std::string("patch: ") + e.what());
    }
}

inline ArchSpec fit_arch(ArchSpec a, const Dataset& d) {
    const Shape s = d.image_shape();
    a.channels = s.at(0);
    a.height = s.at(1);
    a.width = s.at(2);
    a.num_classes = d.num_classes();
    return a;
}

inline std::uint64_t attack_seed(std::uint64_t seed) { return derive_seed(seed, 0xa77ac); }
inline std::uint64_t placement_seed(std::uint64_t seed) { return derive_seed(seed, 0x91ace); }
inline std::uint64_t victim_seed(std::uint64_t seed, std::size_t i) { return derive_seed(seed, 0x71c0 + i); }

/// Loads the dataset, checks the config against it and derives every seed.
inline Resolved resolve(const ExperimentConfig& c) {
    Resolved r;
    r.config = c;
    if (c.eval.victims == 0) throw ConfigError("eval.victims must be at least 1");
    c.surrogate_train.validate();
    c.victim_train.validate();
    r.data = load_data(c.dataset);
    const Dataset& train_set = r.data.train;
    r.surrogate_arch = fit_arch(c.surrogate_arch, train_set);
    r.victim_arch = fit_arch(c.victim_arch, train_set);
    r.attack = c.attack;
    if (c.budget_fraction) {
        if (!(*c.budget_fraction > 0.0 && *c.budget_fraction <= 1.0))
            throw ConfigError("attack.budget_fraction must lie in (0, 1]");
        r.attack.budget = static_cast<std::size_t>(std::llround(*c.budget_fraction * static_cast<double>(train_set.size())));
    }
    r.attack.patch = make_patch(c.patch, train_set.image_shape());
    r.attack.seed = attack_seed(c.seed);
    try {
        r.attack.validate(train_set);
    } catch (const AttackError& e) {
        throw ConfigError(std::string("attack: ") + e.what());
    }
    r.surrogate_train = c.surrogate_train;
    r.victim = {r.victim_arch, c.victim_train};
    r.eval.source_class = r.attack.source_class;
    r.eval.target_class = r.attack.target_class;
    r.eval.patch = r.attack.patch;
    r.eval.placement = {placement_seed(c.seed), c.eval.resample_placement};
    r.eval.cosine_adv_samples = c.eval.cosine_adv_samples;
    for (std::size_t i = 0; i < c.eval.victims; ++i) r.victim_seeds.push_back(victim_seed(c.seed, i));
    ContentHash h;
    h.update(train_set.fingerprint());
    h.update(r.data.val.fingerprint());
    h.update(to_json(c).dump());
    r.input_hash = h.hex();
    return r;
}

// ---------------------------------------------------------------------------
// Run directory

inline std::string file_hash(const std::filesystem::path& p) { return hash_hex(read_text(p)); }

/// Adds one command's outputs to <dir>/manifest.json.
inline void record_manifest(const std::filesystem::path& dir, const std::string& command, const Resolved& r,
                            const std::vector<std::filesystem::path>& outputs, const json& extra_inputs = json::object()) {
    const auto path = dir / "manifest.json";
    json m = std::filesystem::exists(path) ? json::parse(read_text(path)) : json::object();
    json entry;
    entry["config"] = to_json(r.config);
    entry["input_hash"] = r.input_hash;
    entry["dataset_fingerprint"] = r.data.train.fingerprint();
    entry["inputs"] = extra_inputs;
    json outs = json::object();
    for (const auto& o : outputs) outs[o.filename().string()] = file_hash(o);
    entry["outputs"] = outs;
    m[command] = entry;
    write_text(path, m.dump(2) + "\n");
}

inline json provenance(const Resolved& r, const json& extra_inputs = json::object()) {
    return {{"config", to_json(r.config)}, {"input_hash", r.input_hash}, {"inputs", extra_inputs}};
}

// ---------------------------------------------------------------------------
// Commands

struct CraftOutcome {
    CraftResult result;
    std::filesystem::path artifact;
};

inline CraftResult craft_resolved(const Resolved& r, const CraftHooks& hooks = {}) {
    const auto ensemble =
        pretrain_ensemble(r.surrogate_arch, r.data.train, r.surrogate_train, r.attack.ensemble_size, r.attack.seed);
    return craft(ensemble, r.data.train, r.attack, r.surrogate_train, hooks);
}

inline json craft_header_config(const Resolved& r) {
    json j = attack_config_to_json(r.attack);
    j["experiment"] = to_json(r.config);
    return j;
}

inline CraftOutcome cmd_craft(const Resolved& r, const std::filesystem::path& dir) {
    CraftOutcome out{craft_resolved(r), dir / "poisons.bin"};
    save_poisons(out.artifact, out.result.poisons, craft_header_config(r), r.data.train.fingerprint(),
                 out.result.report.retrain_steps);
    write_text(dir / "craft_report.csv", craft_report_csv(out.result.report));
    record_manifest(dir, "craft", r, {out.artifact, dir / "craft_report.csv"});
    return out;
}

inline PoisonArtifact load_checked_artifact(const Resolved& r, const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingInput(path);
    auto art = load_poisons(path);
    const auto want = r.data.train.fingerprint();
    const auto have = art.header.at("dataset_fingerprint").get<std::string>();
    if (have != want)
        throw FingerprintMismatch("poison artifact " + path.string() + " was crafted on dataset " + have +
                                  " but the config resolves to dataset " + want);
    art.poisons.validate(r.data.train, 1e-9);
    return art;
}

inline std::string cosine_rows_csv(const EvalReport& rep) {
    std::ostringstream os;
    os << "seed,epoch,cosine,baseline_cosine\n";
    for (const auto& v : rep.runs) {
        if (!v.per_epoch_cosine) continue;
        const auto& a = *v.per_epoch_cosine;
        const auto& b = *v.per_epoch_cosine_baseline;
        for (std::size_t e = 0; e < a.size(); ++e) {
            os << v.seed << ',' << e + 1 << ',';
            if (a[e]) os << format_double(*a[e]);
            os << ',';
            if (b[e]) os << format_double(*b[e]);
            os << '\n';
        }
    }
    return os.str();
}

inline EvalReport cmd_evaluate(const Resolved& r, const std::filesystem::path& artifact_path,
                               const std::filesystem::path& dir, bool with_cosine) {
    const auto art = load_checked_artifact(r, artifact_path);
    EvalConfig ec = r.eval;
    ec.cosine_diagnostic = with_cosine;
    const EvalReport rep = full_eval(r.data.train, r.data.val, &art.poisons, r.victim, ec, r.victim_seeds);
    const json inputs = {{"artifact", artifact_path.string()}, {"artifact_hash", file_hash(artifact_path)}};
    json j = to_json(rep);
    j["provenance"] = provenance(r, inputs);
    write_text(dir / "report.json", j.dump(2) + "\n");
    write_text(dir / "report.txt", eval_table(rep));
    std::vector<std::filesystem::path> outs{dir / "report.json", dir / "report.txt"};
    if (with_cosine) {
        write_text(dir / "cosine.csv", cosine_rows_csv(rep));
        outs.push_back(dir / "cosine.csv");
    }
    record_manifest(dir, "evaluate", r, outs, inputs);
    return rep;
}

inline DefenseReport cmd_defend(const Resolved& r, const std::filesystem::path& artifact_path,
                                const std::filesystem::path& dir, DefenseKind kind) {
    const auto art = load_checked_artifact(r, artifact_path);
    DefenseConfig dc;
    dc.kind = kind;
    dc.remove_fraction = r.config.defense.remove_fraction;
    dc.strip.n_overlays = r.config.defense.strip_overlays;
    dc.strip.calibration_percentile = r.config.defense.strip_percentile;
    dc.seed = derive_seed(r.config.seed, 0xdef);
    const DefenseReport rep = run_defense(r.data.train, r.data.val, art.poisons, r.victim, r.eval, dc, r.victim_seeds.at(0));
    const json inputs = {{"artifact", artifact_path.string()}, {"artifact_hash", file_hash(artifact_path)}};
    json j = to_json(rep);
    j["provenance"] = provenance(r, inputs);
    const std::string stem = "defense-" + to_string(kind);
    write_text(dir / (stem + ".json"), j.dump(2) + "\n");
    std::vector<std::filesystem::path> outs{dir / (stem + ".json")};
    if (rep.strip) {
        write_text(dir / (stem + ".csv"), strip_csv(*rep.strip));
        outs.push_back(dir / (stem + ".csv"));
    }
    record_manifest(dir, "defend-" + to_string(kind), r, outs, inputs);
    return rep;
}

enum class SweepAxis { eps, budget, retrain_factor, ensemble_size };

inline SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "eps") return SweepAxis::eps;
    if (s == "budget") return SweepAxis::budget;
    if (s == "retrain_factor" || s == "retrain-factor") return SweepAxis::retrain_factor;
    if (s == "ensemble_size" || s == "ensemble-size") return SweepAxis::ensemble_size;
    throw ConfigError("unknown sweep axis '" + s + "' (expected eps, budget, retrain_factor or ensemble_size)");
}

inline std::string to_string(SweepAxis a) {
    switch (a) {
    case SweepAxis::eps: return "eps";
    case SweepAxis::budget: return "budget";
    case SweepAxis::retrain_factor: return "retrain_factor";
    case SweepAxis::ensemble_size: return "ensemble_size";
    }
    return "?";
}

/// Config for one sweep cell. eps values are in 1/255 units.
inline ExperimentConfig sweep_cell(ExperimentConfig c, SweepAxis axis, double value) {
    switch (axis) {
    case SweepAxis::eps: c.attack.eps = value / 255.0; break;
    case SweepAxis::budget:
        c.attack.budget = static_cast<std::size_t>(value);
        c.budget_fraction.reset();
        break;
    case SweepAxis::retrain_factor: c.attack.retrain_factor = static_cast<std::size_t>(value); break;
    case SweepAxis::ensemble_size: c.attack.ensemble_size = static_cast<std::size_t>(value); break;
    }
    return c;
}

inline std::string sweep_csv_header(SweepAxis axis) {
    return std::string(axis == SweepAxis::eps ? "eps_255" : to_string(axis)) +
           ",budget,clean_val_acc,poisoned_val_acc,poisoned_val_acc_stderr,clean_attack_success_rate,"
           "attack_success_rate,attack_success_rate_stderr\n";
}

/// One cell directory per axis value; a cell with a finished cell.json is
/// skipped, so an interrupted sweep resumes where it stopped.
inline std::string cmd_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                             const std::filesystem::path& dir, const std::function<void(const std::string&)>& log = {}) {
    if (values.empty()) throw ConfigError("sweep needs at least one axis value");
    const std::filesystem::path sweep_dir = dir / ("sweep-" + to_string(axis));
    std::ostringstream csv;
    csv << sweep_csv_header(axis);
    for (double v : values) {
        const std::string name = format_double(v);
        const auto cell_dir = sweep_dir / name;
        const auto done = cell_dir / "cell.json";
        json cell;
        if (std::filesystem::exists(done)) {
            cell = json::parse(read_text(done));
            if (log) log("skip " + name + " (finished)");
        } else {
            if (log) log("run " + name);
            const Resolved r = resolve(sweep_cell(base, axis, v));
            const auto crafted = cmd_craft(r, cell_dir);
            const auto rep = cmd_evaluate(r, crafted.artifact, cell_dir, false);
            cell = {{"value", v},
                    {"budget", r.attack.budget},
                    {"clean_val_acc", rep.stat("clean_val_acc").mean},
                    {"poisoned_val_acc", rep.stat("poisoned_val_acc").mean},
                    {"poisoned_val_acc_stderr", rep.stat("poisoned_val_acc").stderr_},
                    {"clean_attack_success_rate", rep.stat("clean_attack_success_rate").mean},
                    {"attack_success_rate", rep.stat("attack_success_rate").mean},
                    {"attack_success_rate_stderr", rep.stat("attack_success_rate").stderr_},
                    {"provenance", provenance(r)}};
            write_text(done, cell.dump(2) + "\n");
        }
        csv << format_double(v) << ',' << cell["budget"].get<std::size_t>();
        for (const char* k : {"clean_val_acc", "poisoned_val_acc", "poisoned_val_acc_stderr", "clean_attack_success_rate",
                              "attack_success_rate", "attack_success_rate_stderr"})
            csv << ',' << format_double(cell[k].get<double>());
        csv << '\n';
    }
    const auto table = dir / ("sweep-" + to_string(axis) + ".csv");
    write_text(table, csv.str());
    return csv.str();
}

/// Human-readable summary of whatever a run directory holds.
inline std::string cmd_report(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw MissingInput(dir);
    std::ostringstream os;
    bool any = false;
    if (std::filesystem::exists(dir / "report.json")) {
        os << "== evaluation (" << (dir / "report.json").string() << ")\n"
           << eval_table(eval_report_from_json(json::parse(read_text(dir / "report.json"))));
        any = true;
    }
    for (const char* name : {"spectral-signatures", "activation-clustering", "strip"}) {
        const auto p = dir / ("defense-" + std::string(name) + ".json");
        if (!std::filesystem::exists(p)) continue;
        const json j = json::parse(read_text(p));
        os << std::fixed << std::setprecision(2) << "== defense " << name << "\n"
           << "  before: val " << 100.0 * j["before"]["val_acc"].get<double>() << "%  ASR "
           << 100.0 * j["before"]["attack_success_rate"].get<double>() << "%\n"
           << "  after:  val " << 100.0 * j["after"]["val_acc"].get<double>() << "%  ASR "
           << 100.0 * j["after"]["attack_success_rate"].get<double>() << "%\n";
        if (j.contains("filter"))
            os << "  removed " << j["filter"]["removed_indices"].size() << " examples, " << j["poisons_removed"] << " of "
               << j["poisons_total"] << " poisons\n";
        any = true;
    }
    for (const char* axis : {"eps", "budget", "retrain_factor", "ensemble_size"}) {
        const auto p = dir / ("sweep-" + std::string(axis) + ".csv");
        if (!std::filesystem::exists(p)) continue;
        os << "== sweep " << axis << "\n" << read_text(p);
        any = true;
    }
    if (!any) os << "no reports in " << dir.string() << "\n";
    return os.str();
}

} // namespace sleeper
