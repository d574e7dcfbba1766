#pragma once

#include <sleeper/data.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

namespace sleeper {

/// Bounded additive perturbations δ for a subset of training examples.
struct PerturbationSet {
    std::vector<Tensor> deltas;
    std::vector<std::size_t> indices;
    double eps = 0.0;

    std::size_t size() const noexcept { return deltas.size(); }

    static PerturbationSet zeros(const Dataset& d, std::vector<std::size_t> indices, double eps) {
        PerturbationSet p;
        p.eps = eps;
        for (auto i : indices) p.deltas.push_back(Tensor(d[i].image.shape()));
        p.indices = std::move(indices);
        return p;
    }

    /// Throws DataError naming the first violated invariant.
    void validate(const Dataset& d, double tol = 1e-12) const {
        if (deltas.size() != indices.size())
            throw DataError("perturbation set has " + std::to_string(deltas.size()) + " deltas for " +
                            std::to_string(indices.size()) + " indices");
        std::set<std::size_t> seen;
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const auto i = indices[k];
            if (i >= d.size()) throw DataError("poison index " + std::to_string(i) + " outside dataset");
            if (!seen.insert(i).second) throw DataError("duplicate poison index " + std::to_string(i));
            if (deltas[k].shape() != d[i].image.shape()) throw DataError("delta shape mismatch at " + std::to_string(i));
            for (std::size_t p = 0; p < deltas[k].numel(); ++p) {
                const double v = deltas[k][p];
                const double x = d[i].image[p] + v;
                if (std::abs(v) > eps + tol) throw DataError("delta exceeds eps at index " + std::to_string(i));
                if (x < -tol || x > 1.0 + tol) throw DataError("perturbed pixel leaves [0,1] at index " + std::to_string(i));
            }
        }
    }

    /// Training set with x_i + δ_i (clamped to [0,1]) at the poisoned indices.
    Dataset apply(const Dataset& d) const {
        std::vector<LabeledExample> ex = d.examples();
        for (std::size_t k = 0; k < indices.size(); ++k) {
            auto& img = ex.at(indices[k]).image;
            for (std::size_t p = 0; p < img.numel(); ++p) img[p] = std::clamp(img[p] + deltas[k][p], 0.0, 1.0);
        }
        return Dataset(std::move(ex), d.num_classes(), d.split());
    }

    double max_abs() const {
        double m = 0.0;
        for (const auto& t : deltas)
            for (double v : t.data()) m = std::max(m, std::abs(v));
        return m;
    }
};

} // namespace sleeper
