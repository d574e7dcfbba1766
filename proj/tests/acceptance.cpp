// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   acceptance [--only autodiff,schedule,adam,attack,ablation,alignment,defenses] [--log FILE]

#include "support/defense_oracles.hpp"
#include "support/gradient_cases.hpp"

#include <sleeper/defenses.hpp>
#include <sleeper/experiment.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <set>

using namespace sleeper;
using namespace sleeper::testing;
using Clock = std::chrono::steady_clock;

namespace {

std::ostream* g_log = &std::cerr;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

struct Verdict {
    std::string name;
    bool pass = false;
    std::string detail;
};

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------

Verdict autodiff_correctness() {
    const auto t0 = Clock::now();
    double worst_first = 0.0, worst_second = 0.0, worst_arch = 0.0;
    std::string worst_first_op, worst_second_op, worst_arch_name;
    for (const auto& c : op_cases()) {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            const double e = first_order_error(c, seed);
            if (e > worst_first) worst_first = e, worst_first_op = c.name;
        }
        if (!c.twice) continue;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const double e = second_order_error(c, seed);
            if (e > worst_second) worst_second = e, worst_second_op = c.name;
        }
    }
    for (const std::string name : {"convnet-s", "convnet-m", "mlp"})
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            const double e = arch_gradient_error(tiny(name), seed);
            if (e > worst_arch) worst_arch = e, worst_arch_name = name;
        }

    // Second order through the crafting objective: d alignment / d delta on a
    // two-layer network with M = 2 poisons and K = 2 adversarial samples.
    const auto data = gen_synthetic(3, 12, 8, 21, 4, 1);
    const Dataset& d = data.train;
    ArchSpec arch = tiny("mlp", 1);
    AttackConfig ac;
    ac.budget = 2;
    ac.adv_sample_count = 2;
    ac.differentiable_augment = false;
    ac.patch = TriggerPatch::colorful(1, 3, 3, 8);
    double worst_align = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(derive_seed(seed, 3));
        const Model m = generic_point(build_model(arch, seed), rng);
        const SurrogateEnsemble e{{m}};
        const std::vector<std::size_t> idx{d.indices_of_class(1)[0], d.indices_of_class(1)[1]};
        Rng adv_rng(seed);
        const std::vector<std::vector<Tensor>> adv{
            adversarial_gradient(m, d, d.indices_of_class(0), ac.patch, 1, ac.adv_sample_count, adv_rng)};
        std::vector<Tensor> deltas;
        for (auto i : idx) deltas.push_back(random_tensor(rng, d[i].image.shape(), -ac.eps, ac.eps));
        auto alignment = [&](const std::vector<Var>& dv) { return ensemble_alignment(e, d, idx, dv, adv, ac, nullptr); };
        const auto leaves = leaves_of(deltas);
        const auto g = values_of(grad(alignment(leaves), leaves));
        const auto fd = central_differences(
            [&](const std::vector<Tensor>& in) { return alignment(constants_of(in)).item(); }, deltas, 1e-5);
        worst_align = std::max(worst_align, relative_error(g, fd));
    }
    const double secs = seconds_since(t0);
    const bool pass = worst_first < 1e-4 && worst_arch < 1e-4 && worst_second < 1e-3 && worst_align < 1e-3 && secs < 60.0;
    return {"autodiff correctness", pass,
            "ops first-order max rel err " + fmt(worst_first) + " (" + worst_first_op + ", 50 seeds), architectures " +
                fmt(worst_arch) + " (" + worst_arch_name + ", 50 seeds), ops second-order " + fmt(worst_second) + " (" +
                worst_second_op + "), d alignment/d delta " + fmt(worst_align) + " (tol 1e-4 / 1e-3), " + fmt(secs, 3) +
                " s (limit 60 s)"};
}

Verdict signed_adam_oracle() {
    // Adam moments with bias correction, computed step by step by hand, then
    // the signed update delta -= lr * sign(m_hat / (sqrt(v_hat) + eps)).
    const double grads[3] = {0.5, -2.0, 0.1};
    const double lrs[3] = {0.1, 0.1, 0.01};
    const double beta1 = 0.9, beta2 = 0.999;
    double m = 0.0, v = 0.0, delta = 0.0, worst = 0.0;
    std::vector<Tensor> d{Tensor::scalar(0.0)};
    auto state = SignedAdamState::zeros_like(d);
    for (std::size_t t = 0; t < 3; ++t) {
        m = beta1 * m + (1.0 - beta1) * grads[t];
        v = beta2 * v + (1.0 - beta2) * grads[t] * grads[t];
        const double m_hat = m / (1.0 - std::pow(beta1, static_cast<double>(t + 1)));
        const double v_hat = v / (1.0 - std::pow(beta2, static_cast<double>(t + 1)));
        const double step = m_hat / (std::sqrt(v_hat) + 1e-8);
        delta -= lrs[t] * static_cast<double>((step > 0.0) - (step < 0.0));
        signed_adam_step(d, {Tensor::scalar(grads[t])}, state, t + 1, lrs[t], SignedAdamConfig{});
        worst = std::max({worst, std::abs(state.m[0].item() - m), std::abs(state.v[0].item() - v),
                          std::abs(d[0].item() - delta)});
    }
    return {"signed-Adam oracle", worst <= 1e-12, "3-step scalar trace max abs err " + fmt(worst) + " (tol 1e-12)"};
}

// ---------------------------------------------------------------------------
// Desk-scale attack runs

struct DeskRun {
    Resolved r;
    CraftResult crafted;
    EvalReport report;
    double seconds = 0.0;
    std::size_t invariant_violations = 0;
    std::size_t steps_checked = 0;
};

DeskRun desk_attack() {
    DeskRun run;
    const auto t0 = Clock::now();
    run.r = resolve(preset_desk_synthetic());
    const Resolved& r = run.r;
    CraftHooks hooks;
    hooks.on_step = [&](std::size_t, const PerturbationSet& p) {
        ++run.steps_checked;
        try {
            p.validate(r.data.train, 0.0);
            if (p.max_abs() > r.attack.eps) ++run.invariant_violations;
        } catch (const std::exception&) {
            ++run.invariant_violations;
        }
    };
    run.crafted = craft_resolved(r, hooks);
    *g_log << "  crafted in " << fmt(seconds_since(t0), 3) << " s" << std::endl;
    EvalConfig ec = r.eval;
    ec.cosine_diagnostic = true;
    run.report = full_eval(r.data.train, r.data.val, &run.crafted.poisons, r.victim, ec, r.victim_seeds);
    run.seconds = seconds_since(t0);
    for (const auto& v : run.report.runs)
        *g_log << "  victim " << v.seed << ": clean acc " << v.clean_val_acc << " ASR " << v.clean_attack_success_rate
               << " | poisoned acc " << v.poisoned_val_acc << " ASR " << v.attack_success_rate << std::endl;
    return run;
}

Verdict algorithm_fidelity(const DeskRun* run) {
    const bool sched = retrain_steps(250, 4) == std::vector<std::size_t>{50, 100, 150, 200} && retrain_steps(250, 0).empty();
    std::string detail = std::string("retrain steps (250,4) ") + (retrain_steps(250, 4) == std::vector<std::size_t>{50, 100, 150, 200} ? "= {50,100,150,200}" : "WRONG") +
                         ", (250,0) " + (retrain_steps(250, 0).empty() ? "none" : "WRONG");
    bool inv = true;
    if (run) {
        inv = run->invariant_violations == 0 && run->steps_checked == run->r.attack.steps;
        detail += "; in-loop l-inf and [0,1] checks on " + std::to_string(run->steps_checked) + "/" +
                  std::to_string(run->r.attack.steps) + " desk crafting steps, " +
                  std::to_string(run->invariant_violations) + " violations";
    } else {
        detail += "; in-loop invariants not run (attack criterion skipped)";
        inv = false;
    }
    return {"algorithm fidelity", sched && inv, detail};
}

Verdict end_to_end(const DeskRun& run) {
    const auto& rep = run.report;
    const double asr = rep.stat("attack_success_rate").mean;
    const double clean_asr = rep.stat("clean_attack_success_rate").mean;
    const double acc_gap = std::abs(rep.stat("clean_val_acc").mean - rep.stat("poisoned_val_acc").mean);
    const auto& steps = run.crafted.report.steps;
    const std::size_t tenth = std::max<std::size_t>(1, steps.size() / 10);
    std::vector<double> first, last;
    for (std::size_t i = 0; i < tenth; ++i) {
        first.push_back(steps[i].alignment_loss);
        last.push_back(steps[steps.size() - 1 - i].alignment_loss);
    }
    const bool trend = mean_of(last) < mean_of(first);
    const bool pass = asr >= 0.50 && clean_asr <= 0.10 && acc_gap <= 0.03 && run.seconds <= 900.0 && trend;
    return {"end-to-end desk attack", pass,
            "poisoned ASR " + fmt(asr, 3) + " (>= 0.50), clean ASR " + fmt(clean_asr, 3) + " (<= 0.10), val acc gap " +
                fmt(100.0 * acc_gap, 3) + " pts (<= 3), alignment loss first/last 10% " + fmt(mean_of(first), 3) + "/" +
                fmt(mean_of(last), 3) + ", " + fmt(run.seconds, 4) + " s (<= 900 s), " +
                std::to_string(rep.runs.size()) + " victims"};
}

// Mean poisoned-victim ASR over the resolved victim seeds.
double victim_asr(const Resolved& r, const PerturbationSet& poisons) {
    std::vector<double> asr;
    for (const auto seed : r.victim_seeds) {
        TrainConfig tc = r.victim.train;
        tc.seed = victim_train_seed(seed);
        const Model m = train(build_model(r.victim.arch, victim_model_seed(seed)), r.data.train, &poisons, tc).model;
        asr.push_back(attack_success_rate(m, r.data.val, r.eval.patch, r.eval.source_class, r.eval.target_class,
                                          r.eval.placement));
    }
    return mean_of(asr);
}

Verdict ablation() {
    struct Arm {
        std::string name;
        Selection selection;
        std::size_t retrain_factor;
        std::vector<double> asr;
    };
    std::vector<Arm> arms{{"selection+retraining", Selection::grad_norm_target_class, 2, {}},
                          {"retraining only", Selection::random, 2, {}},
                          {"no retraining", Selection::random, 0, {}}};
    const auto t0 = Clock::now();
    for (auto& arm : arms) {
        ExperimentConfig c = preset_desk_synthetic();
        c.attack.selection = arm.selection;
        c.attack.retrain_factor = arm.retrain_factor;
        Resolved r = resolve(c);
        for (std::uint64_t s = 1; s <= 5; ++s) {
            // Victims and placements stay fixed; only the crafting seed moves.
            r.attack.seed = attack_seed(s);
            const auto res = craft_resolved(r);
            arm.asr.push_back(victim_asr(r, res.poisons));
            *g_log << "  " << arm.name << " crafting seed " << s << ": ASR " << arm.asr.back() << " ("
                   << fmt(seconds_since(t0), 4) << " s)" << std::endl;
        }
    }
    const double a = mean_of(arms[0].asr), b = mean_of(arms[1].asr), c = mean_of(arms[2].asr);
    const bool pass = a >= b && b >= c && a - c >= 0.10;
    return {"ablation ordering", pass,
            "mean ASR over 5 crafting seeds: selection+retraining " + fmt(a, 3) + ", retraining only " + fmt(b, 3) +
                ", no retraining " + fmt(c, 3) + "; top - bottom " + fmt(100.0 * (a - c), 3) + " pts (>= 10)"};
}

Verdict alignment_diagnostic(const DeskRun& run) {
    // The desk run's three victims plus seven more on the same poisons.
    std::vector<VictimEval> runs = run.report.runs;
    std::vector<std::uint64_t> extra;
    for (std::size_t i = runs.size(); i < 10; ++i) extra.push_back(victim_seed(run.r.config.seed, i));
    EvalConfig ec = run.r.eval;
    ec.cosine_diagnostic = true;
    const auto more = full_eval(run.r.data.train, run.r.data.val, &run.crafted.poisons, run.r.victim, ec, extra);
    runs.insert(runs.end(), more.runs.begin(), more.runs.end());
    std::size_t good = 0;
    std::string fractions;
    for (const auto& v : runs) {
        const double f = dominance(*v.per_epoch_cosine, *v.per_epoch_cosine_baseline);
        good += f >= 0.80;
        fractions += (fractions.empty() ? "" : " ") + fmt(f, 2);
    }
    return {"alignment diagnostic", good >= 8,
            std::to_string(good) + "/10 victim seeds with crafted cosine above the clean baseline on >= 80% of epochs "
                                   "(need 8); per-seed fractions: " + fractions};
}

Verdict defense_oracles() {
    double ss_err = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        for (const auto& [n, d] : {std::pair<Eigen::Index, Eigen::Index>{60, 12}, {15, 40}}) {
            Eigen::MatrixXd f = gaussian(rng, n, d);
            f.col(0) *= 3.0;
            ss_err = std::max(ss_err, relative_l2(spectral_scores(f), svd_scores(f)));
        }
    }
    double worst_precision = 1.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Eigen::MatrixXd f = gaussian(rng, 100, 30, 0.5);
        for (Eigen::Index i = 80; i < 100; ++i) f.row(i).array() += 2.0;
        const auto r = activation_clustering_from_features(f, iota_indices(100), 1, seed);
        std::size_t hits = 0;
        for (auto i : r.removed_indices) hits += i >= 80;
        const double precision =
            r.removed_indices.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(r.removed_indices.size());
        worst_precision = std::min(worst_precision, precision);
    }
    const double strip_err = std::abs(softmax_entropy(std::vector<double>(10, 0.37)) - std::log(10.0));
    const bool pass = ss_err < 1e-8 && worst_precision >= 0.95 && strip_err <= 1e-12;
    return {"defense oracles", pass,
            "spectral scores vs dense SVD rel err " + fmt(ss_err) + " (< 1e-8), activation clustering precision " +
                fmt(worst_precision, 3) + " on the planted 20% blob (>= 0.95), STRIP uniform entropy err " +
                fmt(strip_err) + " (<= 1e-12)"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string only, log_path;
    app.add_option("--only", only, "comma-separated subset: autodiff,schedule,adam,attack,ablation,alignment,defenses");
    app.add_option("--log", log_path, "progress log (default: stderr)");
    CLI11_PARSE(app, argc, argv);

    std::set<std::string> wanted;
    std::stringstream ss(only);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) wanted.insert(item);
    auto want = [&](const char* name) { return wanted.empty() || wanted.contains(name); };
    std::ofstream log_file;
    if (!log_path.empty()) {
        log_file.open(log_path);
        g_log = &log_file;
    }

    std::vector<Verdict> verdicts;
    auto report = [&](Verdict v) {
        std::cout << (v.pass ? "PASS" : "FAIL") << "  " << v.name << ": " << v.detail << std::endl;
        verdicts.push_back(std::move(v));
    };

    if (want("autodiff")) report(autodiff_correctness());
    std::optional<DeskRun> desk;
    if (want("attack") || want("alignment")) {
        *g_log << "desk attack" << std::endl;
        desk = desk_attack();
    }
    if (want("schedule")) report(algorithm_fidelity(desk ? &*desk : nullptr));
    if (want("adam")) report(signed_adam_oracle());
    if (want("attack")) report(end_to_end(*desk));
    if (want("ablation")) {
        *g_log << "ablation" << std::endl;
        report(ablation());
    }
    if (want("alignment")) {
        *g_log << "alignment diagnostic" << std::endl;
        report(alignment_diagnostic(*desk));
    }
    if (want("defenses")) report(defense_oracles());

    const auto failed = std::count_if(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return !v.pass; });
    std::cout << verdicts.size() - static_cast<std::size_t>(failed) << "/" << verdicts.size() << " criteria passed"
              << std::endl;
    return failed == 0 ? 0 : 1;
}
