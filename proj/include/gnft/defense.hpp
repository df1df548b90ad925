#pragma once

// Backdoor repair: gradient-norm regularized fine-tuning (GN-FT), vanilla
// fine-tuning and the Fine-Pruning baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gnft/corpus.hpp"
#include "gnft/error.hpp"
#include "gnft/hash.hpp"
#include "gnft/model.hpp"

namespace gnft {

struct DefenseConfig {
    double r = 0.05;      // perturbation radius
    double alpha = 0.7;   // lambda / r
    std::size_t iterations = 100;
    double lr = 0.05;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;

    void validate() const {
        detail::require(r > 0.0 && std::isfinite(r), "r must be positive");
        detail::require(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0, 1]");
        detail::require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
        detail::require(batch_size >= 1, "batch_size must be >= 1");
    }
};

struct TraceRow {
    std::size_t iteration = 0;
    double g1_norm = 0.0;
    double g2_norm = 0.0;
    double step_norm = 0.0;  // ||g||, before scaling by lr
    double loss = 0.0;       // mini-batch loss at theta
    bool degenerate = false; // ||g1|| too small to normalize; g = g1
};

struct DefenseTrace {
    std::vector<TraceRow> rows;
};

/// Result of combining the gradient at theta with the gradient at the
/// normalized-ascent point theta' = theta + r * g1 / ||g1||.
struct GnftDirection {
    std::vector<double> g;
    double g1_norm = 0.0;
    double g2_norm = 0.0;
    double loss = 0.0;
    bool degenerate = false;
};

inline constexpr double kMinGradNorm = 1e-12;

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Hessian-free direction (1 - alpha) g1 + alpha g2, where g2 is the gradient
/// at theta' on the same data. `grad(theta, out)` must write the gradient at
/// `theta` into `out` and return the loss there. With alpha == 0 the second
/// gradient is not evaluated and g == g1 exactly.
template <class GradFn>
GnftDirection gnft_direction(std::span<const double> theta, GradFn&& grad, double r, double alpha) {
    GnftDirection d;
    std::vector<double> g1;
    d.loss = grad(theta, g1);
    d.g1_norm = l2_norm(g1);
    if (alpha == 0.0) {
        d.g = std::move(g1);
        return d;
    }
    if (!(d.g1_norm >= kMinGradNorm)) {
        d.degenerate = true;
        d.g = std::move(g1);
        return d;
    }
    std::vector<double> perturbed(theta.begin(), theta.end());
    const double scale = r / d.g1_norm;
    for (std::size_t k = 0; k < perturbed.size(); ++k) perturbed[k] += scale * g1[k];
    std::vector<double> g2;
    grad(std::span<const double>(perturbed), g2);
    d.g2_norm = l2_norm(g2);
    d.g.resize(g1.size());
    for (std::size_t k = 0; k < g1.size(); ++k) d.g[k] = (1.0 - alpha) * g1[k] + alpha * g2[k];
    return d;
}

/// One GN-FT update on `batch`. The perturbed parameters live only in a
/// scratch copy of the model.
inline TraceRow gnft_step(Model& model, std::span<const FeatureMap> batch, const DefenseConfig& cfg) {
    cfg.validate();
    Model scratch;
    bool have_scratch = false;
    auto grad = [&](std::span<const double> theta, std::vector<double>& out) {
        if (theta.data() == model.params().data()) return model.loss_and_gradient(batch, out);
        if (!have_scratch) {
            scratch = model;
            have_scratch = true;
        }
        std::copy(theta.begin(), theta.end(), scratch.params().begin());
        return scratch.loss_and_gradient(batch, out);
    };
    const auto d = gnft_direction(std::span<const double>(model.params()), grad, cfg.r, cfg.alpha);
    auto p = model.params();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= cfg.lr * d.g[k];
    return {0, d.g1_norm, d.g2_norm, l2_norm(d.g), d.loss, d.degenerate};
}

namespace detail {

/// Cycles through `data` in seeded per-epoch shuffles, yielding mini-batches.
class BatchCycler {
public:
    BatchCycler(const std::vector<FeatureMap>& data, std::size_t batch_size, std::uint64_t seed)
        : data_(data), batch_size_(std::min(batch_size, data.size())), seed_(seed) {
        reshuffle();
    }

    const std::vector<FeatureMap>& next() {
        if (pos_ >= order_.size()) {
            ++epoch_;
            reshuffle();
        }
        batch_.clear();
        const std::size_t end = std::min(order_.size(), pos_ + batch_size_);
        for (; pos_ < end; ++pos_) batch_.push_back(data_[order_[pos_]]);
        return batch_;
    }

private:
    void reshuffle() {
        order_.resize(data_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        std::mt19937_64 rng(derive_seed(seed_, "ft-epoch/" + std::to_string(epoch_)));
        std::shuffle(order_.begin(), order_.end(), rng);
        pos_ = 0;
    }

    const std::vector<FeatureMap>& data_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0, pos_ = 0;
    std::vector<std::size_t> order_;
    std::vector<FeatureMap> batch_;
};

}  // namespace detail

/// T iterations of gnft_step over seeded mini-batches of D_c.
inline std::pair<Model, DefenseTrace> run_gnft(const Model& model, const std::vector<FeatureMap>& clean,
                                               const DefenseConfig& cfg) {
    cfg.validate();
    Model out = model;
    DefenseTrace trace;
    if (cfg.iterations == 0) return {std::move(out), std::move(trace)};
    detail::require(!clean.empty(), "defense needs a nonempty clean set");
    detail::BatchCycler batches(clean, cfg.batch_size, cfg.seed);
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
        auto row = gnft_step(out, batches.next(), cfg);
        row.iteration = t;
        trace.rows.push_back(row);
    }
    return {std::move(out), std::move(trace)};
}

/// Plain cross-entropy fine-tuning; the GN-FT loop with alpha = 0.
inline std::pair<Model, DefenseTrace> run_vanilla_ft(const Model& model, const std::vector<FeatureMap>& clean,
                                                     DefenseConfig cfg) {
    cfg.alpha = 0.0;
    return run_gnft(model, clean, cfg);
}

// ---------------------------------------------------------------------------
// Fine-Pruning

/// Mean post-ReLU activation of each conv neuron in `layers` over `data`.
inline std::vector<std::pair<NeuronId, double>> mean_activations(const Model& model,
                                                                 const std::vector<FeatureMap>& data,
                                                                 const std::vector<std::size_t>& layers) {
    detail::require(!data.empty(), "activation statistics need a nonempty set");
    std::vector<std::pair<NeuronId, double>> out;
    std::vector<std::size_t> relu_of_conv;  // tape index holding each conv layer's ReLU output
    for (std::size_t li = 0; li < model.layers().size(); ++li)
        if (model.layers()[li].kind == LayerKind::conv) relu_of_conv.push_back(li + 2);
    for (auto l : layers) {
        detail::require(l < model.n_conv_layers(), "activation layer index out of range");
        for (std::size_t j = 0; j < model.conv_channels(l); ++j) out.push_back({{l, j}, 0.0});
    }
    Tape tape;
    for (const auto& x : data) {
        model.check_input(x);
        model.forward(x.values, tape);
        for (auto& [id, acc] : out) {
            const auto& a = tape.acts[relu_of_conv[id.layer]];
            const auto& shp = model.layers()[relu_of_conv[id.layer] - 1].out;
            const std::size_t hw = shp.h * shp.w;
            double s = 0.0;
            for (std::size_t k = 0; k < hw; ++k) s += a[id.channel * hw + k];
            acc += s / double(hw);
        }
    }
    for (auto& [id, acc] : out) acc /= double(data.size());
    return out;
}

struct FinePruneResult {
    Model model;
    DefenseTrace trace;
    std::vector<NeuronId> pruned;
    std::vector<std::pair<NeuronId, double>> activations;
};

/// Masks the `prune_fraction` lowest-activation neurons of `layers` (ties by
/// id), then vanilla fine-tunes. Masks persist in the returned model.
inline FinePruneResult run_fine_pruning(const Model& model, const std::vector<FeatureMap>& clean,
                                        double prune_fraction, const DefenseConfig& ft_cfg,
                                        std::vector<std::size_t> layers = {}) {
    detail::require(prune_fraction >= 0.0 && prune_fraction < 1.0, "prune_fraction must be in [0, 1)");
    if (layers.empty() && model.n_conv_layers() > 0) layers = {model.n_conv_layers() - 1};
    FinePruneResult res{model, {}, {}, {}};
    if (!layers.empty()) {
        res.activations = mean_activations(model, clean, layers);
        auto ranked = res.activations;
        std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second < b.second; });
        const auto n = static_cast<std::size_t>(std::floor(prune_fraction * double(ranked.size())));
        for (std::size_t k = 0; k < n; ++k) {
            res.model.set_masked(ranked[k].first, true);
            res.pruned.push_back(ranked[k].first);
        }
    }
    auto [tuned, trace] = run_vanilla_ft(res.model, clean, ft_cfg);
    res.model = std::move(tuned);
    res.trace = std::move(trace);
    return res;
}

inline void write_trace_csv(const DefenseTrace& trace, std::ostream& os) {
    os << "iteration,g1_norm,g2_norm,step_norm,loss,degenerate\n";
    char buf[256];
    for (const auto& r : trace.rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%d\n", r.iteration, r.g1_norm, r.g2_norm,
                      r.step_norm, r.loss, r.degenerate ? 1 : 0);
        os << buf;
    }
}

}  // namespace gnft
