#pragma once

// Backdoor triggers and training-set poisoning.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "gnft/corpus.hpp"
#include "gnft/error.hpp"
#include "gnft/hash.hpp"

namespace gnft {

/// Constant-valued block written into the MFCC map (Audio BadNets).
struct SpecBlock {
    std::size_t row_offset = 0;
    std::size_t col_offset = 0;
    std::size_t height = 4;
    std::size_t width = 4;
    double value = 1.0;
    bool operator==(const SpecBlock&) const = default;
};

/// Additive sinusoid on the waveform (ultrasonic-style stand-in).
struct ToneOverlay {
    double freq = 4000.0;
    double amplitude = 0.1;
    bool operator==(const ToneOverlay&) const = default;
};

/// Delayed, decayed copy added to the waveform (JingleBack-style stand-in).
struct GainEcho {
    double delay = 0.05;
    double decay = 0.5;
    bool operator==(const GainEcho&) const = default;
};

using TriggerSpec = std::variant<SpecBlock, ToneOverlay, GainEcho>;

inline std::string trigger_kind(const TriggerSpec& t) {
    return std::visit(
        [](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, SpecBlock>) return "spec_block";
            else if constexpr (std::is_same_v<T, ToneOverlay>) return "tone_overlay";
            else return "gain_echo";
        },
        t);
}

inline bool acts_on_features(const TriggerSpec& t) { return std::holds_alternative<SpecBlock>(t); }

inline void validate_trigger(const TriggerSpec& t) {
    if (const auto* b = std::get_if<SpecBlock>(&t)) {
        detail::require(b->height >= 1 && b->width >= 1, "spec_block region must be at least 1x1");
        detail::require(std::isfinite(b->value), "spec_block value must be finite");
    } else if (const auto* o = std::get_if<ToneOverlay>(&t)) {
        detail::require(o->amplitude >= 0.0 && o->amplitude <= 1.0, "tone amplitude must be in [0, 1]");
        detail::require(o->freq >= 0.0 && std::isfinite(o->freq), "tone frequency must be finite and >= 0");
    } else if (const auto* e = std::get_if<GainEcho>(&t)) {
        detail::require(e->decay >= 0.0 && e->decay < 1.0, "echo decay must be in [0, 1)");
        detail::require(e->delay >= 0.0 && std::isfinite(e->delay), "echo delay must be finite and >= 0");
    }
}

inline FeatureMap apply_trigger(FeatureMap input, const TriggerSpec& trigger) {
    validate_trigger(trigger);
    const auto* b = std::get_if<SpecBlock>(&trigger);
    if (!b) throw ArgumentError(trigger_kind(trigger) + " trigger applies to waveforms, not feature maps");
    if (b->row_offset + b->height > input.n_mfcc || b->col_offset + b->width > input.n_frames)
        throw ArgumentError("spec_block region exceeds feature map bounds");
    for (std::size_t r = b->row_offset; r < b->row_offset + b->height; ++r)
        for (std::size_t c = b->col_offset; c < b->col_offset + b->width; ++c) input.at(r, c) = b->value;
    return input;
}

inline AudioSample apply_trigger(AudioSample input, const TriggerSpec& trigger) {
    validate_trigger(trigger);
    auto& w = input.waveform;
    if (const auto* o = std::get_if<ToneOverlay>(&trigger)) {
        if (o->amplitude == 0.0) return input;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double t = double(i) / input.sample_rate;
            w[i] = std::clamp(w[i] + o->amplitude * std::sin(2.0 * std::numbers::pi * o->freq * t), -1.0, 1.0);
        }
    } else if (const auto* e = std::get_if<GainEcho>(&trigger)) {
        if (e->decay == 0.0) return input;
        const auto lag = static_cast<std::size_t>(std::llround(e->delay * input.sample_rate));
        const std::vector<double> dry = w;
        for (std::size_t i = lag; i < w.size(); ++i) w[i] = std::clamp(dry[i] + e->decay * dry[i - lag], -1.0, 1.0);
    } else {
        throw ArgumentError("spec_block trigger applies to feature maps, not waveforms");
    }
    return input;
}

/// Features of `sample` with the trigger applied at whichever level it acts on.
inline FeatureMap triggered_features(const AudioSample& sample, const TriggerSpec& trigger, Featurizer& featurize) {
    if (acts_on_features(trigger)) return apply_trigger(featurize(sample), trigger);
    return featurize(apply_trigger(sample, trigger));
}

inline double max_abs_coefficient(const std::vector<FeatureMap>& maps) {
    double m = 0.0;
    for (const auto& f : maps)
        for (double v : f.values) m = std::max(m, std::abs(v));
    return m;
}

/// Default Audio BadNets block: 4x4 in the high-coefficient, late-time corner.
inline SpecBlock default_spec_block(std::size_t n_mfcc, std::size_t n_frames, double value) {
    SpecBlock b;
    b.height = std::min<std::size_t>(4, n_mfcc);
    b.width = std::min<std::size_t>(4, n_frames);
    b.row_offset = n_mfcc - b.height;
    b.col_offset = n_frames - b.width;
    b.value = value;
    return b;
}

// ---------------------------------------------------------------------------

struct PoisonPlan {
    TriggerSpec trigger;
    double poison_ratio = 0.0;
    std::string target_label;
    std::uint64_t seed = 0;
    std::vector<std::string> poisoned_ids;  // in training-set order

    bool contains(const std::string& id) const {
        return std::find(poisoned_ids.begin(), poisoned_ids.end(), id) != poisoned_ids.end();
    }
    bool operator==(const PoisonPlan&) const = default;
};

struct PoisonedSet {
    std::vector<FeatureMap> train;  // same order as split.train
    std::vector<char> poisoned;     // per-row flag
    PoisonPlan plan;
};

namespace detail {

inline void require_label(const std::vector<AudioSample>& set, const std::string& label) {
    for (const auto& s : set)
        if (s.label == label) return;
    throw ArgumentError("target label '" + label + "' is not a class of the training set");
}

}  // namespace detail

/// Selects which training ids a (ratio, seed) pair poisons; uniform over train.
inline std::vector<std::string> select_poison_ids(const std::vector<AudioSample>& train, double ratio,
                                                  std::uint64_t seed) {
    detail::require(ratio >= 0.0 && ratio <= 1.0, "poison_ratio must be in [0, 1]");
    const auto n = static_cast<std::size_t>(std::llround(ratio * double(train.size())));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(seed, "poison"));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(n);
    std::sort(order.begin(), order.end());
    std::vector<std::string> ids;
    for (auto i : order) ids.push_back(train[i].id);
    return ids;
}

/// Materializes the poisoned training set described by `plan`. D_c and the
/// test set are untouched.
inline PoisonedSet apply_poison_plan(const DatasetSplit& split, const PoisonPlan& plan, Featurizer& featurize) {
    validate_trigger(plan.trigger);
    detail::require_label(split.train, plan.target_label);
    std::set<std::string> ids(plan.poisoned_ids.begin(), plan.poisoned_ids.end());
    PoisonedSet out;
    out.plan = plan;
    out.train.reserve(split.train.size());
    std::size_t hits = 0;
    for (const auto& s : split.train) {
        if (ids.count(s.id)) {
            auto fm = triggered_features(s, plan.trigger, featurize);
            fm.label = plan.target_label;
            out.train.push_back(std::move(fm));
            out.poisoned.push_back(1);
            ++hits;
        } else {
            out.train.push_back(featurize(s));
            out.poisoned.push_back(0);
        }
    }
    if (hits != ids.size()) throw ArgumentError("poison plan references ids absent from the training set");
    return out;
}

inline PoisonedSet poison_dataset(const DatasetSplit& split, const TriggerSpec& trigger, double poison_ratio,
                                  const std::string& target_label, std::uint64_t seed, Featurizer& featurize) {
    detail::require_label(split.train, target_label);
    PoisonPlan plan{trigger, poison_ratio, target_label, seed, select_poison_ids(split.train, poison_ratio, seed)};
    return apply_poison_plan(split, plan, featurize);
}

/// Triggered copies of every test sample whose true label differs from the
/// target; the true label is kept for bookkeeping.
inline std::vector<FeatureMap> build_asr_eval_set(const std::vector<AudioSample>& test, const TriggerSpec& trigger,
                                                  const std::string& target_label, Featurizer& featurize) {
    detail::require(!test.empty(), "ASR evaluation needs a nonempty test set");
    std::vector<FeatureMap> out;
    for (const auto& s : test)
        if (s.label != target_label) out.push_back(triggered_features(s, trigger, featurize));
    return out;
}

// ---------------------------------------------------------------------------
// Plan manifest. Doubles are written with 17 significant digits so a plan
// replays bit-exactly.
//
//   # gnft poison plan v1
//   trigger <kind>
//   <param> <value>          (kind-specific)
//   poison_ratio <r>
//   target_label <label>
//   seed <n>
//   poisoned <count>
//   <id>                     (count lines)

inline void write_poison_plan(const PoisonPlan& p, std::ostream& os) {
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    os << "# gnft poison plan v1\n";
    os << "trigger " << trigger_kind(p.trigger) << '\n';
    if (const auto* b = std::get_if<SpecBlock>(&p.trigger)) {
        os << "row_offset " << b->row_offset << "\ncol_offset " << b->col_offset << "\nheight " << b->height
           << "\nwidth " << b->width << "\nvalue " << num(b->value) << '\n';
    } else if (const auto* o = std::get_if<ToneOverlay>(&p.trigger)) {
        os << "freq " << num(o->freq) << "\namplitude " << num(o->amplitude) << '\n';
    } else if (const auto* e = std::get_if<GainEcho>(&p.trigger)) {
        os << "delay " << num(e->delay) << "\ndecay " << num(e->decay) << '\n';
    }
    os << "poison_ratio " << num(p.poison_ratio) << "\ntarget_label " << p.target_label << "\nseed " << p.seed
       << "\npoisoned " << p.poisoned_ids.size() << '\n';
    for (const auto& id : p.poisoned_ids) os << id << '\n';
}

inline void write_poison_plan(const PoisonPlan& p, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write poison plan: " + path.string());
    write_poison_plan(p, os);
}

inline PoisonPlan read_poison_plan(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "# gnft poison plan v1") throw FormatError("missing poison plan header");
    std::map<std::string, std::string> kv;
    PoisonPlan p;
    while (std::getline(in, line)) {
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw FormatError("malformed poison plan line: " + line);
        const std::string key = line.substr(0, sp), val = line.substr(sp + 1);
        if (key == "poisoned") {
            const auto n = std::stoull(val);
            for (std::size_t i = 0; i < n; ++i) {
                if (!std::getline(in, line)) throw FormatError("poison plan id list truncated");
                p.poisoned_ids.push_back(line);
            }
            break;
        }
        kv[key] = val;
    }
    auto get = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw FormatError("poison plan missing key '" + k + "'");
        return it->second;
    };
    try {
        const std::string kind = get("trigger");
        if (kind == "spec_block") {
            p.trigger = SpecBlock{std::stoull(get("row_offset")), std::stoull(get("col_offset")),
                                  std::stoull(get("height")), std::stoull(get("width")), std::stod(get("value"))};
        } else if (kind == "tone_overlay") {
            p.trigger = ToneOverlay{std::stod(get("freq")), std::stod(get("amplitude"))};
        } else if (kind == "gain_echo") {
            p.trigger = GainEcho{std::stod(get("delay")), std::stod(get("decay"))};
        } else {
            throw FormatError("unknown trigger kind '" + kind + "'");
        }
        p.poison_ratio = std::stod(get("poison_ratio"));
        p.target_label = get("target_label");
        p.seed = std::stoull(get("seed"));
    } catch (const std::logic_error& e) {
        throw FormatError(std::string("bad numeric field in poison plan: ") + e.what());
    }
    return p;
}

inline PoisonPlan read_poison_plan(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open poison plan: " + path.string());
    return read_poison_plan(in);
}

}  // namespace gnft
