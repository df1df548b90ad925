#pragma once

// Per-neuron pruning forensics: clean/backdoor loss change, the four-zone
// taxonomy and clean-input gradient magnitudes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "gnft/corpus.hpp"
#include "gnft/error.hpp"
#include "gnft/model.hpp"
#include "gnft/poisoning.hpp"

namespace gnft {

enum class Zone { C, B, H, R };

inline char zone_char(Zone z) { return "CBHR"[static_cast<int>(z)]; }

/// Sign rule; an exact zero loss change counts as non-positive.
inline Zone zone_of(double clc, double blc) {
    const bool c = clc > 0.0, b = blc > 0.0;
    if (c && b) return Zone::H;
    if (c) return Zone::C;
    if (b) return Zone::B;
    return Zone::R;
}

struct NeuronRecord {
    NeuronId id;
    double clc = 0.0;
    double blc = 0.0;
    Zone zone = Zone::R;
    double mean_grad_norm = 0.0;
};

struct ZoneSummary {
    std::map<Zone, std::size_t> counts{{Zone::C, 0}, {Zone::B, 0}, {Zone::H, 0}, {Zone::R, 0}};
    std::vector<std::size_t> layers;
    std::size_t total() const {
        std::size_t n = 0;
        for (auto& [z, c] : counts) n += c;
        return n;
    }
    std::size_t backdoor_related() const { return counts.at(Zone::B) + counts.at(Zone::H); }
};

struct ZoneReport {
    ZoneSummary summary;
    std::vector<NeuronRecord> records;
};

/// Inputs for the backdoor loss: D_c with the trigger applied and every label
/// replaced by the target.
inline std::vector<FeatureMap> backdoor_inputs(const std::vector<AudioSample>& clean, const TriggerSpec& trigger,
                                               const std::string& target_label, Featurizer& featurize) {
    std::vector<FeatureMap> out;
    for (const auto& s : clean) {
        auto fm = triggered_features(s, trigger, featurize);
        fm.label = target_label;
        out.push_back(std::move(fm));
    }
    return out;
}

inline std::vector<FeatureMap> backdoor_inputs(const std::vector<FeatureMap>& clean, const TriggerSpec& trigger,
                                               const std::string& target_label) {
    std::vector<FeatureMap> out;
    for (const auto& x : clean) {
        auto fm = apply_trigger(x, trigger);
        fm.label = target_label;
        out.push_back(std::move(fm));
    }
    return out;
}

/// Evaluates mean per-sample loss changes caused by masking each neuron in
/// `ids`, on a private copy of the model. Layers before the masked conv are
/// evaluated once per sample and reused.
class LossChangeSweep {
public:
    LossChangeSweep(const Model& model, const std::vector<FeatureMap>& data) : model_(model) {
        detail::require(!data.empty(), "loss change needs a nonempty data set");
        std::vector<double> p;
        for (const auto& x : data) {
            model_.check_input(x);
            Tape t;
            model_.forward(x.values, t);
            const auto y = model_.class_index(x.label);
            base_loss_.push_back(Model::softmax_xent(t.acts.back(), y, p));
            labels_.push_back(y);
            t.cols.clear();
            t.argmax.clear();
            tapes_.push_back(std::move(t));
        }
    }

    double operator()(NeuronId id) {
        ScopedMask guard(model_, id);
        const std::size_t start = model_.conv_layer_index(id.layer);
        std::vector<double> p;
        double acc = 0.0;
        Tape t;
        t.reserve_layers(model_.layers().size());
        for (std::size_t i = 0; i < tapes_.size(); ++i) {
            t.acts[start] = tapes_[i].acts[start];
            model_.forward_from(start, t);
            acc += Model::softmax_xent(t.acts.back(), labels_[i], p) - base_loss_[i];
        }
        return acc / double(tapes_.size());
    }

private:
    Model model_;
    std::vector<Tape> tapes_;
    std::vector<double> base_loss_;
    std::vector<std::size_t> labels_;
};

/// Mean over D_c of L(masked) - L(original) on true labels.
inline double clean_loss_change(const Model& model, NeuronId id, const std::vector<FeatureMap>& clean) {
    detail::require(model.valid(id), "invalid neuron id " + to_string(id));
    return LossChangeSweep(model, clean)(id);
}

/// Same quantity on triggered D_c against the target label.
inline double backdoor_loss_change(const Model& model, NeuronId id, const std::vector<FeatureMap>& clean,
                                   const TriggerSpec& trigger, const std::string& target_label) {
    detail::require(model.valid(id), "invalid neuron id " + to_string(id));
    return LossChangeSweep(model, backdoor_inputs(clean, trigger, target_label))(id);
}

/// The last two conv layers (or fewer if the model has fewer).
inline std::vector<std::size_t> last_conv_layers(const Model& model, std::size_t n = 2) {
    std::vector<std::size_t> out;
    const std::size_t L = model.n_conv_layers();
    for (std::size_t i = L > n ? L - n : 0; i < L; ++i) out.push_back(i);
    return out;
}

/// CLC/BLC for every neuron in `layers`; `backdoor` is the output of
/// backdoor_inputs().
inline ZoneReport classify_zones(const Model& model, const std::vector<std::size_t>& layers,
                                 const std::vector<FeatureMap>& clean, const std::vector<FeatureMap>& backdoor) {
    detail::require(!layers.empty(), "layer filter must be nonempty");
    const std::set<std::size_t> uniq(layers.begin(), layers.end());
    for (auto l : uniq) detail::require(l < model.n_conv_layers(), "layer filter names a non-conv layer");
    LossChangeSweep clc(model, clean), blc(model, backdoor);
    ZoneReport rep;
    rep.summary.layers.assign(uniq.begin(), uniq.end());
    for (auto l : uniq)
        for (std::size_t j = 0; j < model.conv_channels(l); ++j) {
            NeuronRecord r;
            r.id = {l, j};
            r.clc = clc(r.id);
            r.blc = blc(r.id);
            r.zone = zone_of(r.clc, r.blc);
            ++rep.summary.counts[r.zone];
            rep.records.push_back(r);
        }
    return rep;
}

inline ZoneReport classify_zones(const Model& model, const std::vector<std::size_t>& layers,
                                 const std::vector<FeatureMap>& clean, const TriggerSpec& trigger,
                                 const std::string& target_label) {
    return classify_zones(model, layers, clean, backdoor_inputs(clean, trigger, target_label));
}

/// Per-sample gradient-norm series: norms[sample][record] for the records' neurons.
struct GradientProfile {
    std::vector<std::string> sample_ids;
    std::vector<std::vector<double>> norms;

    /// Mean over records of `zone` for every sample.
    std::vector<double> zone_series(const std::vector<NeuronRecord>& records, Zone zone) const {
        std::vector<double> out;
        for (const auto& row : norms) {
            double s = 0.0;
            std::size_t n = 0;
            for (std::size_t k = 0; k < records.size(); ++k)
                if (records[k].zone == zone) {
                    s += row[k];
                    ++n;
                }
            out.push_back(n ? s / double(n) : 0.0);
        }
        return out;
    }
};

/// Fills mean_grad_norm with the average, over up to `max_samples` clean
/// samples taken one at a time, of the L2 norm of each neuron's gradient block.
inline GradientProfile gradient_profile(const Model& model, const std::vector<FeatureMap>& clean,
                                        std::vector<NeuronRecord>& records, std::size_t max_samples = 50) {
    detail::require(!clean.empty() && max_samples > 0, "gradient profile needs at least one clean sample");
    GradientProfile prof;
    const std::size_t n = std::min(max_samples, clean.size());
    std::vector<double> grad;
    for (auto& r : records) r.mean_grad_norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        model.loss_and_gradient(std::span<const FeatureMap>(&clean[i], 1), grad);
        std::vector<double> row;
        for (auto& r : records) {
            const double g = model.block_norm(grad, r.id);
            row.push_back(g);
            r.mean_grad_norm += g;
        }
        prof.sample_ids.push_back(clean[i].id);
        prof.norms.push_back(std::move(row));
    }
    for (auto& r : records) r.mean_grad_norm /= double(n);
    return prof;
}

inline double median(std::vector<double> v) {
    detail::require(!v.empty(), "median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// ---------------------------------------------------------------------------
// Exports

inline void write_records_csv(const std::vector<NeuronRecord>& records, std::ostream& os) {
    os << "layer,channel,clc,blc,zone,mean_grad_norm\n";
    char buf[200];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,%.10g,%c,%.10g\n", r.id.layer, r.id.channel, r.clc, r.blc,
                      zone_char(r.zone), r.mean_grad_norm);
        os << buf;
    }
}

/// Whitespace-separated "clc blc zone" rows, one per neuron.
inline void write_scatter(const std::vector<NeuronRecord>& records, std::ostream& os) {
    os << "# clc blc zone layer channel\n";
    char buf[160];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%.10g %.10g %c %zu %zu\n", r.clc, r.blc, zone_char(r.zone), r.id.layer,
                      r.id.channel);
        os << buf;
    }
}

inline void write_zone_counts(const ZoneSummary& s, std::ostream& os) {
    os << "zone,count\n";
    for (auto& [z, c] : s.counts) os << zone_char(z) << ',' << c << '\n';
    os << "total," << s.total() << '\n';
}

inline void write_profile_csv(const GradientProfile& prof, const std::vector<NeuronRecord>& records,
                              std::ostream& os) {
    os << "sample,zone_C,zone_B,zone_H,zone_R\n";
    std::vector<std::vector<double>> series;
    for (Zone z : {Zone::C, Zone::B, Zone::H, Zone::R}) series.push_back(prof.zone_series(records, z));
    char buf[200];
    for (std::size_t i = 0; i < prof.sample_ids.size(); ++i) {
        std::snprintf(buf, sizeof buf, ",%.10g,%.10g,%.10g,%.10g\n", series[0][i], series[1][i], series[2][i],
                      series[3][i]);
        os << prof.sample_ids[i] << buf;
    }
}

}  // namespace gnft
