#pragma once

// From-scratch supervised training: SGD with Nesterov momentum, weight decay
// and a stepwise learning-rate schedule.

#include <sleeper/data.hpp>
#include <sleeper/io.hpp>
#include <sleeper/model.hpp>
#include <sleeper/perturbation.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sleeper {

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr0 = 0.01;
    std::vector<std::size_t> lr_drop_epochs{10, 15};
    double lr_drop_factor = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 4e-4;
    bool augment = true;
    AugmentParams augment_params{2, 0.5};
    std::uint64_t seed = 0;

    /// Scaled-down recipe for 16x16 synthetic data.
    static TrainConfig desk() { return {}; }

    /// 40-epoch surrogate / retraining recipe for CIFAR-10.
    static TrainConfig paper_cifar10() {
        TrainConfig c;
        c.epochs = 40;
        c.batch_size = 128;
        c.lr0 = 0.1;
        c.lr_drop_epochs = {14, 24, 35};
        c.weight_decay = 4e-4;
        c.augment_params = {4, 0.5};
        return c;
    }

    /// 80-epoch victim recipe for CIFAR-10.
    static TrainConfig paper_cifar10_victim() {
        TrainConfig c = paper_cifar10();
        c.epochs = 80;
        return c;
    }

    void validate() const {
        if (!(lr0 > 0.0)) throw std::invalid_argument("TrainConfig: lr0 must be positive");
        if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
        for (std::size_t i = 0; i < lr_drop_epochs.size(); ++i) {
            if (lr_drop_epochs[i] >= std::max<std::size_t>(epochs, 1) && epochs > 0)
                throw std::invalid_argument("TrainConfig: lr drop epoch " + std::to_string(lr_drop_epochs[i]) +
                                            " not below epochs");
            if (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1])
                throw std::invalid_argument("TrainConfig: lr drop epochs must be strictly increasing");
        }
    }

    /// Learning rate for a 0-based epoch.
    double lr_at(std::size_t epoch) const {
        double lr = lr0;
        for (auto d : lr_drop_epochs)
            if (epoch >= d) lr *= lr_drop_factor;
        return lr;
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"lr0", c.lr0},
             {"lr_drop_epochs", c.lr_drop_epochs},
             {"lr_drop_factor", c.lr_drop_factor},
             {"momentum", c.momentum},
             {"nesterov", c.nesterov},
             {"weight_decay", c.weight_decay},
             {"augment", c.augment},
             {"augment_pad", c.augment_params.pad},
             {"flip_prob", c.augment_params.flip_prob},
             {"seed", c.seed}};
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    std::optional<double> val_acc;
};

struct TrainResult {
    Model model;
    std::vector<EpochMetrics> history;
};

/// Called after every epoch with the 1-based epoch number and the current model.
using EpochCallback = std::function<void(std::size_t epoch, const Model& model)>;

/// Momentum buffers for one parameter vector.
class NesterovSgd {
public:
    NesterovSgd(const ParameterVector& params, double momentum, double weight_decay, bool nesterov)
        : momentum_(momentum), weight_decay_(weight_decay), nesterov_(nesterov) {
        for (const auto& s : params.segments) velocity_.emplace_back(s.shape());
    }

    /// v <- mu v + g ; theta <- theta - lr (g + mu v)   (g includes weight decay)
    void step(ParameterVector& params, const std::vector<Tensor>& grads, double lr) {
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto theta = params.segments[k].data();
            auto g = grads[k].data();
            auto v = velocity_[k].data();
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double gi = g[i] + weight_decay_ * theta[i];
                v[i] = momentum_ * v[i] + gi;
                theta[i] -= lr * (nesterov_ ? gi + momentum_ * v[i] : v[i]);
            }
        }
    }

private:
    double momentum_, weight_decay_;
    bool nesterov_;
    std::vector<Tensor> velocity_;
};

inline std::vector<int> predict(const Model& model, const Tensor& batch) {
    const Tensor z = model.logits(batch);
    const std::size_t rows = z.dim(0), cols = z.dim(1);
    std::vector<int> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c)
            if (z[r * cols + c] > z[r * cols + best]) best = c;
        out[r] = static_cast<int>(best);
    }
    return out;
}

struct Accuracy {
    double overall = 0.0;
    std::vector<double> per_class;        // NaN-free: 0 for classes without examples
    std::vector<std::size_t> class_count;
};

/// Argmax accuracy over the whole dataset.
inline Accuracy evaluate(const Model& model, const Dataset& data, std::size_t chunk = 256) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    Accuracy acc;
    acc.per_class.assign(data.num_classes(), 0.0);
    acc.class_count.assign(data.num_classes(), 0);
    std::vector<std::size_t> correct(data.num_classes(), 0);
    std::size_t total_correct = 0;
    const auto all = data.all_indices();
    for (std::size_t start = 0; start < all.size(); start += chunk) {
        const std::span<const std::size_t> idx(all.data() + start, std::min(chunk, all.size() - start));
        const auto pred = predict(model, data.batch(idx));
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const int y = data[idx[b]].label;
            ++acc.class_count[static_cast<std::size_t>(y)];
            if (pred[b] == y) {
                ++correct[static_cast<std::size_t>(y)];
                ++total_correct;
            }
        }
    }
    acc.overall = static_cast<double>(total_correct) / static_cast<double>(data.size());
    for (std::size_t c = 0; c < data.num_classes(); ++c)
        if (acc.class_count[c]) acc.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(acc.class_count[c]);
    return acc;
}

/// Trains `model` on `data` (with δ applied at the perturbed indices) and
/// returns the final parameters together with per-epoch metrics.
inline TrainResult train(Model model, const Dataset& data, const PerturbationSet* perturbations, const TrainConfig& cfg,
                         const Dataset* val = nullptr, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    Dataset poisoned;
    const Dataset* train_set = &data;
    if (perturbations) {
        perturbations->validate(data, 1e-9);
        poisoned = perturbations->apply(data);
        train_set = &poisoned;
    }

    TrainResult result{std::move(model), {}};
    NesterovSgd opt(result.model.params(), cfg.momentum, cfg.weight_decay, cfg.nesterov);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, 2 * epoch));
        Rng aug_rng(derive_seed(cfg.seed, 2 * epoch + 1));
        const auto order = order_rng.permutation(train_set->size());
        const double lr = cfg.lr_at(epoch);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
            Tensor batch = train_set->batch(idx);
            if (cfg.augment) batch = augment(batch, cfg.augment_params, aug_rng);
            const auto labels = train_set->labels(idx);
            std::vector<Tensor> grads;
            try {
                const auto params = result.model.parameter_vars();
                const Var logits = result.model.forward(Var::constant(batch), params);
                const Var loss = softmax_cross_entropy(logits, labels);
                if (!std::isfinite(loss.item())) throw AutodiffError("loss is not finite");
                loss_sum += loss.item() * static_cast<double>(idx.size());
                const std::size_t k = logits.shape()[1];
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < k; ++c)
                        if (logits.value()[b * k + c] > logits.value()[b * k + best]) best = c;
                    correct += static_cast<int>(best) == labels[b];
                }
                for (const Var& g : grad(loss, params)) grads.push_back(g.value());
            } catch (const AutodiffError& e) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch + 1) + ": " + e.what());
            }
            opt.step(result.model.params(), grads, lr);
        }
        EpochMetrics m;
        m.epoch = epoch + 1;
        m.lr = lr;
        m.train_loss = loss_sum / static_cast<double>(train_set->size());
        m.train_acc = static_cast<double>(correct) / static_cast<double>(train_set->size());
        if (val && !val->empty()) m.val_acc = evaluate(result.model, *val).overall;
        result.history.push_back(m);
        if (on_epoch) on_epoch(epoch + 1, result.model);
    }
    return result;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& history) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,train_acc,val_acc\n";
    for (const auto& m : history) {
        os << m.epoch << ',' << format_double(m.lr) << ',' << format_double(m.train_loss) << ','
           << format_double(m.train_acc) << ',';
        if (m.val_acc) os << format_double(*m.val_acc);
        os << '\n';
    }
    return os.str();
}

} // namespace sleeper
