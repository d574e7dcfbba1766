#pragma once

// Spectral Signatures and Activation Clustering (training-set filters),
// STRIP (test-time detection), and the filter, retrain, remeasure pipeline.

#include <sleeper/eval.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sleeper {

class DefenseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FilterResult {
    std::string defense;
    int class_id = 0;
    std::vector<std::size_t> examined; // dataset indices of the inspected class
    std::vector<double> scores;        // aligned with `examined`; higher is more suspicious
    std::vector<std::size_t> removed_indices;
    double fraction_removed = 0.0;
    bool degenerate = false;
};

inline json to_json(const FilterResult& r) {
    return {{"defense", r.defense},         {"class_id", r.class_id},
            {"examined", r.examined},       {"scores", r.scores},
            {"removed_indices", r.removed_indices}, {"fraction_removed", r.fraction_removed},
            {"degenerate", r.degenerate}};
}

inline FilterResult filter_result_from_json(const json& j) {
    FilterResult r;
    r.defense = j.at("defense").get<std::string>();
    r.class_id = j.at("class_id").get<int>();
    r.examined = j.at("examined").get<std::vector<std::size_t>>();
    r.scores = j.at("scores").get<std::vector<double>>();
    r.removed_indices = j.at("removed_indices").get<std::vector<std::size_t>>();
    r.fraction_removed = j.at("fraction_removed").get<double>();
    r.degenerate = j.at("degenerate").get<bool>();
    return r;
}

/// Penultimate features of the given examples, one row each.
inline Eigen::MatrixXd class_features(const Model& model, const Dataset& d, std::span<const std::size_t> indices,
                                      std::size_t chunk = 256) {
    Eigen::MatrixXd f;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        const std::span<const std::size_t> idx = indices.subspan(start, std::min(chunk, indices.size() - start));
        const Tensor t = model.penultimate_features(d.batch(idx));
        const std::size_t n = t.dim(0), dim = t.numel() / n;
        if (f.size() == 0) f.resize(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(dim));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < dim; ++c)
                f(static_cast<Eigen::Index>(start + r), static_cast<Eigen::Index>(c)) = t[r * dim + c];
    }
    return f;
}

inline Eigen::MatrixXd centered(const Eigen::MatrixXd& f) {
    return f.rowwise() - f.colwise().mean();
}

/// Indices of the k largest scores; ties go to the earlier entry.
inline std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(std::min(k, order.size()));
    return order;
}

// ---------------------------------------------------------------------------
// Spectral Signatures

/// Squared projection of each centred row onto the top right singular vector.
/// Uses the eigenvectors of whichever of RᵀR and RRᵀ is smaller.
inline std::vector<double> spectral_scores(const Eigen::MatrixXd& features) {
    if (features.rows() < 2) throw DefenseError("spectral signatures need at least 2 examples");
    const Eigen::MatrixXd r = centered(features);
    Eigen::VectorXd proj;
    if (r.cols() <= r.rows()) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r.transpose() * r);
        proj = r * es.eigenvectors().col(r.cols() - 1);
    } else {
        // R v = σ u with σ² the top eigenvalue of RRᵀ.
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r * r.transpose());
        const double lambda = std::max(0.0, es.eigenvalues()(r.rows() - 1));
        proj = std::sqrt(lambda) * es.eigenvectors().col(r.rows() - 1);
    }
    std::vector<double> s(static_cast<std::size_t>(proj.size()));
    for (Eigen::Index i = 0; i < proj.size(); ++i) s[static_cast<std::size_t>(i)] = proj(i) * proj(i);
    return s;
}

inline std::size_t removal_count(double remove_fraction, std::size_t n) {
    if (!(remove_fraction >= 0.0 && remove_fraction <= 1.0))
        throw DefenseError("remove fraction must lie in [0, 1], got " + std::to_string(remove_fraction));
    return static_cast<std::size_t>(std::floor(remove_fraction * static_cast<double>(n) + 1e-9));
}

inline FilterResult spectral_signatures_from_features(const Eigen::MatrixXd& features,
                                                      std::vector<std::size_t> examined, int class_id,
                                                      double remove_fraction) {
    FilterResult r;
    r.defense = "spectral-signatures";
    r.class_id = class_id;
    r.scores = spectral_scores(features);
    r.examined = std::move(examined);
    for (auto k : top_k(r.scores, removal_count(remove_fraction, r.examined.size())))
        r.removed_indices.push_back(r.examined[k]);
    std::sort(r.removed_indices.begin(), r.removed_indices.end());
    r.fraction_removed = static_cast<double>(r.removed_indices.size()) / static_cast<double>(r.examined.size());
    return r;
}

inline FilterResult spectral_signatures(const Model& model, const Dataset& d, int class_id, double remove_fraction) {
    auto idx = d.indices_of_class(class_id);
    if (idx.size() < 2) throw DefenseError("class " + std::to_string(class_id) + " has fewer than 2 examples");
    const auto f = class_features(model, d, idx);
    return spectral_signatures_from_features(f, std::move(idx), class_id, remove_fraction);
}

/// Removal fraction that takes 1.5x the poison budget out of a class.
inline double default_spectral_fraction(std::size_t budget, std::size_t class_size) {
    if (class_size == 0) throw DefenseError("empty class");
    return std::min(1.0, 1.5 * static_cast<double>(budget) / static_cast<double>(class_size));
}

// ---------------------------------------------------------------------------
// Activation Clustering

/// Rows projected onto the top `dims` principal components.
inline Eigen::MatrixXd pca_project(const Eigen::MatrixXd& features, std::size_t dims) {
    const Eigen::MatrixXd r = centered(features);
    const Eigen::Index n = r.rows(), d = r.cols();
    if (r.cols() <= r.rows()) {
        const Eigen::Index k = std::min<Eigen::Index>(static_cast<Eigen::Index>(dims), d);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r.transpose() * r);
        return r * es.eigenvectors().rightCols(k).rowwise().reverse();
    }
    const Eigen::Index k = std::min<Eigen::Index>(static_cast<Eigen::Index>(dims), n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r * r.transpose());
    Eigen::MatrixXd out(n, k);
    for (Eigen::Index c = 0; c < k; ++c) {
        const Eigen::Index src = n - 1 - c;
        out.col(c) = std::sqrt(std::max(0.0, es.eigenvalues()(src))) * es.eigenvectors().col(src);
    }
    return out;
}

struct KMeansResult {
    std::vector<int> assignment;
    Eigen::MatrixXd centers;
    std::vector<double> objective; // after every assignment step
    std::vector<std::size_t> sizes;
};

/// Lloyd's algorithm with k-means++ seeding. Ties go to the lower cluster id;
/// an empty cluster keeps its previous centre.
inline KMeansResult kmeans(const Eigen::MatrixXd& x, std::size_t k, Rng& rng, std::size_t max_iter = 100) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (n == 0 || k == 0) throw DefenseError("k-means needs points and clusters");
    KMeansResult res;
    res.centers.resize(static_cast<Eigen::Index>(k), x.cols());
    res.centers.row(0) = x.row(static_cast<Eigen::Index>(rng.below(n)));
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], (x.row(static_cast<Eigen::Index>(i)) - res.centers.row(static_cast<Eigen::Index>(c - 1))).squaredNorm());
            total += d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double u = rng.uniform() * total;
            for (pick = 0; pick + 1 < n; ++pick) {
                if (u < d2[pick]) break;
                u -= d2[pick];
            }
            while (d2[pick] == 0.0 && pick > 0) --pick;
        }
        res.centers.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(pick));
    }

    res.assignment.assign(n, -1);
    for (std::size_t it = 0; it < max_iter; ++it) {
        bool changed = false;
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double dist = (x.row(static_cast<Eigen::Index>(i)) - res.centers.row(static_cast<Eigen::Index>(c))).squaredNorm();
                if (dist < best_d) {
                    best_d = dist;
                    best = static_cast<int>(c);
                }
            }
            changed |= res.assignment[i] != best;
            res.assignment[i] = best;
            obj += best_d;
        }
        res.objective.push_back(obj);
        if (!changed) break;
        Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), x.cols());
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sum.row(res.assignment[i]) += x.row(static_cast<Eigen::Index>(i));
            ++count[static_cast<std::size_t>(res.assignment[i])];
        }
        for (std::size_t c = 0; c < k; ++c)
            if (count[c]) res.centers.row(static_cast<Eigen::Index>(c)) = sum.row(static_cast<Eigen::Index>(c)) / static_cast<double>(count[c]);
    }
    res.sizes.assign(k, 0);
    for (int a : res.assignment) ++res.sizes[static_cast<std::size_t>(a)];
    return res;
}

/// Two-way split of the class in PCA space; the smaller cluster is removed.
/// An empty cluster marks the result degenerate and nothing is removed, as
/// does an exact size tie.
inline FilterResult activation_clustering_from_features(const Eigen::MatrixXd& features,
                                                        std::vector<std::size_t> examined, int class_id,
                                                        std::uint64_t seed, std::size_t dims = 10) {
    if (features.rows() < 2) throw DefenseError("activation clustering needs at least 2 examples");
    FilterResult r;
    r.defense = "activation-clustering";
    r.class_id = class_id;
    r.examined = std::move(examined);
    Rng rng(derive_seed(seed, 0xac));
    const auto km = kmeans(pca_project(features, dims), 2, rng);
    r.degenerate = km.sizes[0] == 0 || km.sizes[1] == 0;
    const double n = static_cast<double>(r.examined.size());
    for (int a : km.assignment) r.scores.push_back(1.0 - static_cast<double>(km.sizes[static_cast<std::size_t>(a)]) / n);
    if (!r.degenerate && km.sizes[0] != km.sizes[1]) {
        const int small = km.sizes[0] < km.sizes[1] ? 0 : 1;
        for (std::size_t i = 0; i < km.assignment.size(); ++i)
            if (km.assignment[i] == small) r.removed_indices.push_back(r.examined[i]);
    }
    std::sort(r.removed_indices.begin(), r.removed_indices.end());
    r.fraction_removed = static_cast<double>(r.removed_indices.size()) / n;
    return r;
}

inline FilterResult activation_clustering(const Model& model, const Dataset& d, int class_id, std::uint64_t seed) {
    auto idx = d.indices_of_class(class_id);
    if (idx.size() < 2) throw DefenseError("class " + std::to_string(class_id) + " has fewer than 2 examples");
    const auto f = class_features(model, d, idx);
    return activation_clustering_from_features(f, std::move(idx), class_id, seed);
}

// ---------------------------------------------------------------------------
// STRIP

/// Shannon entropy (nats) of softmax(logits).
inline double softmax_entropy(std::span<const double> logits) {
    if (logits.empty()) throw DefenseError("entropy of an empty distribution");
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - m);
    const double log_z = std::log(z);
    double h = 0.0;
    for (double l : logits) {
        const double lp = l - m - log_z;
        const double p = std::exp(lp);
        if (p > 0.0) h -= p * lp;
    }
    return h;
}

/// Mean entropy over 50/50 blends of `input` with overlays drawn from the
/// pool. The overlay choice is seeded by the input's pixels, so the result
/// does not depend on call order.
inline double strip_entropy(const Model& model, const Tensor& input, std::span<const Tensor> overlay_pool,
                            std::size_t n_overlays, std::uint64_t seed) {
    if (overlay_pool.empty()) throw DefenseError("STRIP needs a non-empty overlay pool");
    if (n_overlays == 0) throw DefenseError("STRIP needs at least one overlay");
    Rng rng(image_seed(seed, input));
    const auto picks = rng.sample_without_replacement(overlay_pool.size(), n_overlays);
    const Shape& s = input.shape();
    const std::size_t per = input.numel();
    Tensor batch(Shape{picks.size(), s.at(0), s.at(1), s.at(2)});
    for (std::size_t b = 0; b < picks.size(); ++b) {
        const Tensor& o = overlay_pool[picks[b]];
        if (o.shape() != s) throw DefenseError("overlay shape " + shape_str(o.shape()) + " differs from input");
        for (std::size_t p = 0; p < per; ++p) batch[b * per + p] = 0.5 * input[p] + 0.5 * o[p];
    }
    const Tensor z = model.logits(batch);
    const std::size_t k = z.dim(1);
    double total = 0.0;
    for (std::size_t b = 0; b < picks.size(); ++b)
        total += softmax_entropy(std::span<const double>(z.data().data() + b * k, k));
    return total / static_cast<double>(picks.size());
}

struct StripDecision {
    double entropy = 0.0;
    bool rejected = false;
};

inline StripDecision strip_detect(const Model& model, const Tensor& input, std::span<const Tensor> overlay_pool,
                                  std::size_t n_overlays, double threshold, std::uint64_t seed) {
    const double h = strip_entropy(model, input, overlay_pool, n_overlays, seed);
    return {h, h < threshold};
}

/// Linear-interpolated empirical quantile, q in [0, 1].
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw DefenseError("quantile of an empty sample");
    std::sort(xs.begin(), xs.end());
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

struct StripConfig {
    std::size_t n_overlays = 20;
    double calibration_percentile = 0.01;
    std::uint64_t seed = 0;
};

struct StripEntry {
    std::string kind; // "clean" or "patched-source"
    std::size_t index = 0;
    double entropy = 0.0;
    bool rejected = false;
    int prediction = 0;
};

struct StripEval {
    double threshold = 0.0;
    double false_rejection_rate = 0.0;
    double detection_rate = 0.0;
    double attack_success_rate = 0.0;       // without the detector
    double attack_success_rate_strip = 0.0; // undetected and classified as the target
    std::vector<StripEntry> entries;
};

/// The held-out set supplies the overlay pool and the threshold calibration;
/// `test` supplies clean inputs and, patched, the source-class attack inputs.
inline StripEval strip_evaluate(const Model& model, const Dataset& held_out, const Dataset& test, const EvalConfig& ec,
                                const StripConfig& sc) {
    if (held_out.empty()) throw DefenseError("STRIP needs held-out clean data");
    std::vector<Tensor> pool;
    for (const auto& e : held_out.examples()) pool.push_back(e.image);
    std::vector<double> calib;
    for (const auto& e : held_out.examples()) calib.push_back(strip_entropy(model, e.image, pool, sc.n_overlays, sc.seed));

    StripEval out;
    out.threshold = quantile(calib, sc.calibration_percentile);
    std::size_t clean_rejected = 0, detected = 0, hits = 0, hits_undetected = 0, n_src = 0;
    for (const auto& e : test.examples()) {
        const auto d = strip_detect(model, e.image, pool, sc.n_overlays, out.threshold, sc.seed);
        const int y = predict(model, e.image.reshaped({1, e.image.dim(0), e.image.dim(1), e.image.dim(2)}))[0];
        clean_rejected += d.rejected;
        out.entries.push_back({"clean", e.index, d.entropy, d.rejected, y});
        if (e.label != ec.source_class) continue;
        Rng place(image_seed(ec.placement.seed, e.image));
        const Tensor patched = apply_patch(e.image, ec.patch, place);
        const auto pd = strip_detect(model, patched, pool, sc.n_overlays, out.threshold, sc.seed);
        const int py = predict(model, patched.reshaped({1, e.image.dim(0), e.image.dim(1), e.image.dim(2)}))[0];
        ++n_src;
        detected += pd.rejected;
        hits += py == ec.target_class;
        hits_undetected += py == ec.target_class && !pd.rejected;
        out.entries.push_back({"patched-source", e.index, pd.entropy, pd.rejected, py});
    }
    if (n_src == 0) throw DefenseError("no source-class images in the STRIP test split");
    out.false_rejection_rate = static_cast<double>(clean_rejected) / static_cast<double>(test.size());
    out.detection_rate = static_cast<double>(detected) / static_cast<double>(n_src);
    out.attack_success_rate = static_cast<double>(hits) / static_cast<double>(n_src);
    out.attack_success_rate_strip = static_cast<double>(hits_undetected) / static_cast<double>(n_src);
    return out;
}

inline std::string strip_csv(const StripEval& e) {
    std::ostringstream os;
    os << "kind,index,entropy,rejected,prediction\n";
    for (const auto& r : e.entries)
        os << r.kind << ',' << r.index << ',' << format_double(r.entropy) << ',' << (r.rejected ? 1 : 0) << ','
           << r.prediction << '\n';
    return os.str();
}

/// Even positions of `val` (by index) are held out for STRIP; odd ones are tested.
inline std::pair<Dataset, Dataset> strip_split(const Dataset& val) {
    std::vector<std::size_t> even, odd;
    for (std::size_t i = 0; i < val.size(); ++i) (i % 2 == 0 ? even : odd).push_back(i);
    return {val.subset(even), val.subset(odd)};
}

// ---------------------------------------------------------------------------
// Filter, retrain from scratch, remeasure

enum class DefenseKind { spectral_signatures, activation_clustering, strip };

inline std::string to_string(DefenseKind k) {
    switch (k) {
    case DefenseKind::spectral_signatures: return "spectral-signatures";
    case DefenseKind::activation_clustering: return "activation-clustering";
    case DefenseKind::strip: return "strip";
    }
    return "?";
}

inline DefenseKind defense_from_string(const std::string& s) {
    if (s == "spectral-signatures" || s == "ss") return DefenseKind::spectral_signatures;
    if (s == "activation-clustering" || s == "ac") return DefenseKind::activation_clustering;
    if (s == "strip") return DefenseKind::strip;
    throw DefenseError("unknown defense '" + s + "' (expected spectral-signatures, activation-clustering or strip)");
}

struct DefenseConfig {
    DefenseKind kind = DefenseKind::spectral_signatures;
    std::optional<double> remove_fraction; // spectral signatures; default from the poison budget
    StripConfig strip;
    std::uint64_t seed = 0;
};

struct Measurement {
    double val_acc = 0.0;
    double attack_success_rate = 0.0;
};

struct DefenseReport {
    DefenseKind kind = DefenseKind::spectral_signatures;
    Measurement before;
    Measurement after;
    std::optional<FilterResult> filter;
    std::size_t poisons_removed = 0;
    std::size_t poisons_total = 0;
    std::optional<StripEval> strip;
};

inline json to_json(const DefenseReport& r) {
    json j{{"defense", to_string(r.kind)},
           {"before", {{"val_acc", r.before.val_acc}, {"attack_success_rate", r.before.attack_success_rate}}},
           {"after", {{"val_acc", r.after.val_acc}, {"attack_success_rate", r.after.attack_success_rate}}},
           {"poisons_removed", r.poisons_removed},
           {"poisons_total", r.poisons_total}};
    if (r.filter) j["filter"] = to_json(*r.filter);
    if (r.strip)
        j["strip"] = {{"threshold", r.strip->threshold},
                      {"false_rejection_rate", r.strip->false_rejection_rate},
                      {"detection_rate", r.strip->detection_rate},
                      {"attack_success_rate", r.strip->attack_success_rate},
                      {"attack_success_rate_strip", r.strip->attack_success_rate_strip}};
    return j;
}

/// Trains a victim on the poisoned set, then either filters the target class
/// and retrains a second victim from scratch on the survivors, or wraps the
/// victim in STRIP. Reports validation accuracy and ASR before and after.
inline DefenseReport run_defense(const Dataset& train_set, const Dataset& val, const PerturbationSet& poisons,
                                 const VictimSetup& victim, const EvalConfig& ec, const DefenseConfig& dc,
                                 std::uint64_t victim_seed) {
    DefenseReport rep;
    rep.kind = dc.kind;
    rep.poisons_total = poisons.size();
    const Dataset poisoned = poisons.apply(train_set);
    const Model init = build_model(victim.arch, victim_model_seed(victim_seed));
    TrainConfig tc = victim.train;
    tc.seed = victim_train_seed(victim_seed);
    const Model first = train(init, poisoned, nullptr, tc).model;
    rep.before = {evaluate(first, val).overall,
                  attack_success_rate(first, val, ec.patch, ec.source_class, ec.target_class, ec.placement)};

    if (dc.kind == DefenseKind::strip) {
        const auto [held_out, test] = strip_split(val);
        StripConfig sc = dc.strip;
        sc.seed = derive_seed(dc.seed, 0x5791);
        rep.strip = strip_evaluate(first, held_out, test, ec, sc);
        std::size_t kept_correct = 0;
        for (const auto& e : rep.strip->entries)
            if (e.kind == "clean") kept_correct += !e.rejected && e.prediction == test[e.index].label;
        rep.after = {static_cast<double>(kept_correct) / static_cast<double>(test.size()),
                     rep.strip->attack_success_rate_strip};
        return rep;
    }

    if (dc.kind == DefenseKind::spectral_signatures) {
        const double frac = dc.remove_fraction.value_or(
            default_spectral_fraction(poisons.size(), poisoned.indices_of_class(ec.target_class).size()));
        rep.filter = spectral_signatures(first, poisoned, ec.target_class, frac);
    } else {
        rep.filter = activation_clustering(first, poisoned, ec.target_class, dc.seed);
    }
    std::vector<std::size_t> poison_idx = poisons.indices;
    std::sort(poison_idx.begin(), poison_idx.end());
    for (auto i : rep.filter->removed_indices)
        rep.poisons_removed += std::binary_search(poison_idx.begin(), poison_idx.end(), i);

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < poisoned.size(); ++i)
        if (!std::binary_search(rep.filter->removed_indices.begin(), rep.filter->removed_indices.end(), i))
            keep.push_back(i);
    const Model second = train(init, poisoned.subset(keep), nullptr, tc).model;
    rep.after = {evaluate(second, val).overall,
                 attack_success_rate(second, val, ec.patch, ec.source_class, ec.target_class, ec.placement)};
    return rep;
}

} // namespace sleeper
