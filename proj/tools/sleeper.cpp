// sleeper: craft, evaluate, defend, sweep and report on hidden-trigger
// clean-label poisoning experiments.
//
// Exit codes: 0 ok, 1 bad config or usage, 2 missing input path,
// 3 dataset fingerprint mismatch, 4 runtime failure.

#include <sleeper/experiment.hpp>

#include <CLI11.hpp>

#include <iostream>

using namespace sleeper;

namespace {

struct Common {
    std::string config_path;
    std::string preset_name;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "JSON experiment config (unknown keys are rejected)");
    cmd->add_option("--preset", c.preset_name, "desk-synthetic or paper-cifar10 (overrides the config's preset)");
    cmd->add_option("--seed", c.seed, "top-level seed; every other seed derives from it");
    cmd->add_option("--out", c.out, "run directory (default: the config's output_dir)");
    cmd->add_flag("--dry-run", c.dry_run, "validate the config and print it, write nothing");
}

ExperimentConfig build_config(const Common& c) {
    json j = json::object();
    if (!c.config_path.empty()) {
        if (!std::filesystem::exists(c.config_path)) throw MissingInput(c.config_path);
        try {
            j = json::parse(read_text(c.config_path));
        } catch (const json::parse_error& e) {
            throw ConfigError(c.config_path + ": " + e.what());
        }
    }
    if (!c.preset_name.empty()) j["preset"] = c.preset_name;
    ExperimentConfig cfg = config_from_json(j);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    return cfg;
}

int fail(int code, const std::string& kind, const std::string& msg) {
    std::cerr << "error: " << kind << ": " << msg << "\n";
    return code;
}

std::vector<double> parse_values(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) {
            try {
                out.push_back(std::stod(item));
            } catch (const std::exception&) {
                throw ConfigError("sweep value '" + item + "' is not a number");
            }
        }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hidden-trigger clean-label poisoning lab"};
    app.require_subcommand(1);

    Common craft_opts, eval_opts, defend_opts, sweep_opts;
    std::string eval_artifact, defend_artifact, defense_name, axis_name, axis_values, report_dir;
    bool with_cosine = false, resample = false;

    auto* craft = app.add_subcommand("craft", "craft poisons and write poisons.bin + craft_report.csv");
    add_common(craft, craft_opts);

    auto* evaluate = app.add_subcommand("evaluate", "train clean and poisoned victims and write report.json");
    add_common(evaluate, eval_opts);
    evaluate->add_option("--artifact", eval_artifact, "poison artifact (default: <run dir>/poisons.bin)");
    evaluate->add_flag("--with-cosine-diagnostic", with_cosine, "also write cosine.csv, one row per victim epoch");
    evaluate->add_flag("--resample-placement", resample, "draw patch placements from one stream instead of per image");

    auto* defend = app.add_subcommand("defend", "filter and retrain, or STRIP, and report ASR before/after");
    add_common(defend, defend_opts);
    defend->add_option("--artifact", defend_artifact, "poison artifact (default: <run dir>/poisons.bin)");
    defend->add_option("--defense", defense_name, "spectral-signatures | activation-clustering | strip")->required();

    auto* sweep = app.add_subcommand("sweep", "craft + evaluate per axis value and write sweep-<axis>.csv");
    add_common(sweep, sweep_opts);
    sweep->add_option("--axis", axis_name, "eps | budget | retrain_factor | ensemble_size")->required();
    sweep->add_option("--values", axis_values, "comma-separated values (eps in 1/255 units)")->required();

    auto* report = app.add_subcommand("report", "print the tables held in a run directory");
    report->add_option("dir", report_dir, "run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (report->parsed()) {
            std::cout << cmd_report(report_dir);
            return 0;
        }

        const Common& opts = craft->parsed() ? craft_opts : evaluate->parsed() ? eval_opts : defend->parsed() ? defend_opts : sweep_opts;
        ExperimentConfig cfg = build_config(opts);
        if (evaluate->parsed() && resample) cfg.eval.resample_placement = true;
        std::optional<DefenseKind> kind;
        if (defend->parsed()) {
            try {
                kind = defense_from_string(defense_name);
            } catch (const DefenseError& e) {
                return fail(1, "config", e.what());
            }
        }
        std::optional<SweepAxis> axis;
        std::vector<double> values;
        if (sweep->parsed()) {
            axis = sweep_axis_from_string(axis_name);
            values = parse_values(axis_values);
            if (values.empty()) throw ConfigError("sweep needs at least one axis value");
        }

        const Resolved r = resolve(cfg);
        const std::filesystem::path dir(cfg.output_dir);
        if (opts.dry_run) {
            std::cout << json{{"config", to_json(cfg)},
                              {"budget", r.attack.budget},
                              {"train_size", r.data.train.size()},
                              {"input_hash", r.input_hash}}
                             .dump(2)
                      << "\n";
            return 0;
        }

        if (craft->parsed()) {
            const auto out = cmd_craft(r, dir);
            std::cout << "crafted " << out.result.poisons.size() << " poisons -> " << out.artifact.string() << "\n";
            const auto& steps = out.result.report.steps;
            std::cout << "alignment loss: first " << steps.front().alignment_loss << ", last "
                      << steps.back().alignment_loss << "\n";
        } else if (evaluate->parsed()) {
            const auto art = eval_artifact.empty() ? dir / "poisons.bin" : std::filesystem::path(eval_artifact);
            std::cout << eval_table(cmd_evaluate(r, art, dir, with_cosine));
        } else if (defend->parsed()) {
            const auto art = defend_artifact.empty() ? dir / "poisons.bin" : std::filesystem::path(defend_artifact);
            const auto rep = cmd_defend(r, art, dir, *kind);
            std::cout << to_json(rep).dump(2) << "\n";
        } else {
            std::cout << cmd_sweep(cfg, *axis, values, dir, [](const std::string& s) { std::cerr << s << "\n"; });
        }
        return 0;
    } catch (const MissingInput& e) {
        return fail(2, "missing input", e.what());
    } catch (const FingerprintMismatch& e) {
        return fail(3, "fingerprint mismatch", e.what());
    } catch (const ConfigError& e) {
        return fail(1, "config", e.what());
    } catch (const std::exception& e) {
        return fail(4, "runtime", e.what());
    }
}
