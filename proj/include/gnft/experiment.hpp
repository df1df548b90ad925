#pragma once

// Sectioned experiment configuration and the staged pipeline behind the
// command-line tool: corpus -> poison -> train -> analyze -> defend -> eval.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnft/corpus.hpp"
#include "gnft/defense.hpp"
#include "gnft/error.hpp"
#include "gnft/evalkit.hpp"
#include "gnft/hash.hpp"
#include "gnft/model.hpp"
#include "gnft/neuronlab.hpp"
#include "gnft/poisoning.hpp"

namespace gnft {

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public ArgumentError {
public:
    ConfigError(const std::string& field, const std::string& what) : ArgumentError(field + ": " + what) {}
};

inline const std::vector<std::string>& keyword_labels() {
    static const std::vector<std::string> k{"yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"};
    return k;
}

struct CorpusSection {
    std::string source = "synthetic";  // "synthetic" or a directory of <label>/<file>.wav
    std::size_t n_classes = 10;
    std::size_t n_per_class = 50;
    std::vector<std::string> labels = keyword_labels();
    std::uint64_t seed = 7;
    int sample_rate = 16000;
    double duration = 1.0;
    double test_fraction = 0.2;
    double clean_ratio = 0.05;
    std::uint64_t split_seed = 1;
    MfccConfig mfcc;
};

struct AttackSection {
    TriggerSpec trigger = default_spec_block(40, 32, 1.0);
    bool auto_value = true;        // spec_block value = max |coefficient| of normalized clean train
    bool auto_position = true;     // spec_block placed in the last rows/frames
    double ratio = 0.1;
    std::string target = "up";
    std::uint64_t seed = 3;
};

struct TrainSection {
    std::string arch = "small_cnn";
    std::vector<std::size_t> channels{16, 32, 32};
    std::string head = "gap";
    std::size_t hidden = 64;
    std::size_t epochs = 12;
    double lr = 0.1;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;  // initialization and shuffling
};

struct DefenseSection {
    std::string method = "gnft";  // gnft | ft | fp
    DefenseConfig cfg{0.05, 0.7, 300, 0.1, 16, 5};
    double prune_fraction = 0.2;
};

struct AnalysisSection {
    bool enabled = true;
    std::vector<std::size_t> layers;  // empty: the last two conv layers
    std::size_t profile_samples = 50;
};

struct EvalSection {
    std::string output_dir = "gnft_run";
    bool embeddings = true;
};

struct ExperimentConfig {
    CorpusSection corpus;
    AttackSection attack;
    TrainSection train;
    DefenseSection defense;
    AnalysisSection analysis;
    EvalSection eval;
};

// ---------------------------------------------------------------------------
// JSON <-> config

namespace detail {

using json = nlohmann::json;

/// Reads one section, rejecting unknown keys and reporting full field paths.
class SectionReader {
public:
    SectionReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.push_back(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError(field(key), "expected true or false");
            } else if constexpr (std::is_unsigned_v<T>) {
                if (!it->is_number_unsigned()) throw ConfigError(field(key), "expected a nonnegative integer");
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer()) throw ConfigError(field(key), "expected an integer");
            }
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError(field(key), "wrong type (" + std::string(it->type_name()) + ")");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }
    const json& raw(const char* key) {
        seen_.push_back(key);
        return j_.at(key);
    }
    std::string field(const std::string& key) const { return path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
                throw ConfigError(field(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

inline json trigger_to_json(const TriggerSpec& t, bool auto_value, bool auto_position) {
    json j{{"kind", trigger_kind(t)}};
    if (const auto* b = std::get_if<SpecBlock>(&t)) {
        j["height"] = b->height;
        j["width"] = b->width;
        if (auto_position) {
            j["position"] = "auto";
        } else {
            j["row_offset"] = b->row_offset;
            j["col_offset"] = b->col_offset;
        }
        if (auto_value) j["value"] = "auto";
        else j["value"] = b->value;
    } else if (const auto* o = std::get_if<ToneOverlay>(&t)) {
        j["freq"] = o->freq;
        j["amplitude"] = o->amplitude;
    } else if (const auto* e = std::get_if<GainEcho>(&t)) {
        j["delay"] = e->delay;
        j["decay"] = e->decay;
    }
    return j;
}

inline void read_trigger(const json& j, AttackSection& a) {
    SectionReader r(j, "attack.trigger");
    std::string kind = "spec_block";
    r.get("kind", kind);
    if (kind == "spec_block") {
        SpecBlock b;
        r.get("height", b.height);
        r.get("width", b.width);
        a.auto_position = true;
        if (r.has("position")) {
            if (r.raw("position") != "auto") throw ConfigError("attack.trigger.position", "only \"auto\" is accepted");
        }
        if (r.has("row_offset") || r.has("col_offset")) {
            a.auto_position = false;
            r.get("row_offset", b.row_offset);
            r.get("col_offset", b.col_offset);
        }
        a.auto_value = true;
        if (r.has("value")) {
            const auto& v = r.raw("value");
            if (v.is_string()) {
                if (v != "auto") throw ConfigError("attack.trigger.value", "expected a number or \"auto\"");
            } else if (v.is_number()) {
                a.auto_value = false;
                b.value = v.get<double>();
            } else {
                throw ConfigError("attack.trigger.value", "expected a number or \"auto\"");
            }
        }
        a.trigger = b;
    } else if (kind == "tone_overlay") {
        ToneOverlay o;
        r.get("freq", o.freq);
        r.get("amplitude", o.amplitude);
        a.trigger = o;
    } else if (kind == "gain_echo") {
        GainEcho e;
        r.get("delay", e.delay);
        r.get("decay", e.decay);
        a.trigger = e;
    } else {
        throw ConfigError("attack.trigger.kind",
                          "unknown trigger '" + kind + "' (expected spec_block, tone_overlay or gain_echo)");
    }
    r.finish();
    try {
        validate_trigger(a.trigger);
    } catch (const ArgumentError& e) {
        throw ConfigError("attack.trigger", e.what());
    }
}

inline void check(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    json j;
    const auto& m = c.corpus.mfcc;
    j["corpus"] = {{"source", c.corpus.source},
                   {"n_classes", c.corpus.n_classes},
                   {"n_per_class", c.corpus.n_per_class},
                   {"labels", c.corpus.labels},
                   {"seed", c.corpus.seed},
                   {"sample_rate", c.corpus.sample_rate},
                   {"duration", c.corpus.duration},
                   {"test_fraction", c.corpus.test_fraction},
                   {"clean_ratio", c.corpus.clean_ratio},
                   {"split_seed", c.corpus.split_seed},
                   {"mfcc",
                    {{"n_mfcc", m.n_mfcc},
                     {"frame_len", m.frame_len},
                     {"hop", m.hop},
                     {"n_frames", m.n_frames},
                     {"n_mels", m.n_mels},
                     {"f_min", m.f_min},
                     {"f_max", m.f_max}}}};
    j["attack"] = {{"trigger", detail::trigger_to_json(c.attack.trigger, c.attack.auto_value, c.attack.auto_position)},
                   {"ratio", c.attack.ratio},
                   {"target", c.attack.target},
                   {"seed", c.attack.seed}};
    j["train"] = {{"arch", c.train.arch},         {"channels", c.train.channels}, {"head", c.train.head},
                  {"hidden", c.train.hidden},     {"epochs", c.train.epochs},     {"lr", c.train.lr},
                  {"batch_size", c.train.batch_size}, {"seed", c.train.seed}};
    const auto& d = c.defense.cfg;
    j["defense"] = {{"method", c.defense.method}, {"r", d.r},
                    {"alpha", d.alpha},           {"iterations", d.iterations},
                    {"lr", d.lr},                 {"batch_size", d.batch_size},
                    {"seed", d.seed},             {"prune_fraction", c.defense.prune_fraction}};
    j["analysis"] = {{"enabled", c.analysis.enabled},
                     {"layers", c.analysis.layers},
                     {"profile_samples", c.analysis.profile_samples}};
    j["eval"] = {{"output_dir", c.eval.output_dir}, {"embeddings", c.eval.embeddings}};
    return j;
}

/// Validates every section; throws ConfigError naming the first bad field.
inline void validate(const ExperimentConfig& c) {
    using detail::check;
    const auto& k = c.corpus;
    if (k.source == "synthetic") {
        check(k.n_classes >= 2, "corpus.n_classes", "must be >= 2");
        check(k.n_per_class >= 2, "corpus.n_per_class", "must be >= 2");
        check(k.sample_rate >= 1000, "corpus.sample_rate", "must be >= 1000");
        check(k.duration > 0.0, "corpus.duration", "must be positive");
    } else {
        check(std::filesystem::is_directory(k.source), "corpus.source",
              "expected \"synthetic\" or an existing directory, got '" + k.source + "'");
    }
    check(k.test_fraction > 0.0 && k.test_fraction < 1.0, "corpus.test_fraction", "must be in (0, 1)");
    check(k.clean_ratio > 0.0 && k.clean_ratio <= 1.0, "corpus.clean_ratio", "must be in (0, 1]");
    try {
        k.mfcc.validate();
    } catch (const ArgumentError& e) {
        throw ConfigError("corpus.mfcc", e.what());
    }
    check(k.mfcc.n_mels >= k.mfcc.n_mfcc, "corpus.mfcc.n_mels", "must be >= n_mfcc");

    const auto& a = c.attack;
    check(a.ratio >= 0.0 && a.ratio <= 1.0, "attack.ratio", "must be in [0, 1]");
    check(!a.target.empty(), "attack.target", "must be nonempty");
    if (k.source == "synthetic") {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < k.n_classes; ++i) names.push_back(synth_label(i, k.labels));
        check(std::find(names.begin(), names.end(), a.target) != names.end(), "attack.target",
              "label '" + a.target + "' is not one of the corpus classes");
    }
    if (const auto* b = std::get_if<SpecBlock>(&a.trigger)) {
        check(b->height <= k.mfcc.n_mfcc && b->width <= k.mfcc.n_frames, "attack.trigger",
              "spec_block larger than the feature map");
        if (!a.auto_position)
            check(b->row_offset + b->height <= k.mfcc.n_mfcc && b->col_offset + b->width <= k.mfcc.n_frames,
                  "attack.trigger", "spec_block extends past the feature map");
    }

    const auto& t = c.train;
    check(t.arch == "small_cnn" || t.arch == "mlp", "train.arch", "unknown architecture '" + t.arch + "'");
    if (t.arch == "small_cnn") {
        check(!t.channels.empty(), "train.channels", "needs at least one conv layer");
        for (auto ch : t.channels) check(ch >= 1, "train.channels", "channel counts must be >= 1");
        check(t.head == "gap" || t.head == "flatten", "train.head", "expected gap or flatten");
    }
    check(t.hidden >= 1, "train.hidden", "must be >= 1");
    check(t.lr > 0.0, "train.lr", "must be positive");
    check(t.batch_size >= 1, "train.batch_size", "must be >= 1");

    const auto& d = c.defense;
    check(d.method == "gnft" || d.method == "ft" || d.method == "fp", "defense.method",
          "unknown method '" + d.method + "' (expected gnft, ft or fp)");
    check(d.cfg.r > 0.0, "defense.r", "must be positive");
    check(d.cfg.alpha >= 0.0 && d.cfg.alpha <= 1.0, "defense.alpha", "must be in [0, 1]");
    check(d.cfg.lr > 0.0, "defense.lr", "must be positive");
    check(d.cfg.batch_size >= 1, "defense.batch_size", "must be >= 1");
    check(d.prune_fraction >= 0.0 && d.prune_fraction < 1.0, "defense.prune_fraction", "must be in [0, 1)");

    if (c.analysis.enabled && t.arch == "small_cnn")
        for (auto l : c.analysis.layers)
            check(l < t.channels.size(), "analysis.layers", "layer " + std::to_string(l) + " is not a conv layer");
    check(c.analysis.profile_samples >= 1, "analysis.profile_samples", "must be >= 1");
    check(!c.eval.output_dir.empty(), "eval.output_dir", "must be nonempty");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::SectionReader;
    ExperimentConfig c;
    if (!j.is_object()) throw ConfigError("<root>", "expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& key = it.key();
        if (key == "corpus") {
            SectionReader r(*it, "corpus");
            auto& k = c.corpus;
            r.get("source", k.source);
            r.get("n_classes", k.n_classes);
            r.get("n_per_class", k.n_per_class);
            r.get("labels", k.labels);
            r.get("seed", k.seed);
            r.get("sample_rate", k.sample_rate);
            r.get("duration", k.duration);
            r.get("test_fraction", k.test_fraction);
            r.get("clean_ratio", k.clean_ratio);
            r.get("split_seed", k.split_seed);
            if (r.has("mfcc")) {
                SectionReader m(r.raw("mfcc"), "corpus.mfcc");
                m.get("n_mfcc", k.mfcc.n_mfcc);
                m.get("frame_len", k.mfcc.frame_len);
                m.get("hop", k.mfcc.hop);
                m.get("n_frames", k.mfcc.n_frames);
                m.get("n_mels", k.mfcc.n_mels);
                m.get("f_min", k.mfcc.f_min);
                m.get("f_max", k.mfcc.f_max);
                m.finish();
            }
            r.finish();
        } else if (key == "attack") {
            SectionReader r(*it, "attack");
            if (r.has("trigger")) detail::read_trigger(r.raw("trigger"), c.attack);
            r.get("ratio", c.attack.ratio);
            r.get("target", c.attack.target);
            r.get("seed", c.attack.seed);
            r.finish();
        } else if (key == "train") {
            SectionReader r(*it, "train");
            auto& t = c.train;
            r.get("arch", t.arch);
            r.get("channels", t.channels);
            r.get("head", t.head);
            r.get("hidden", t.hidden);
            r.get("epochs", t.epochs);
            r.get("lr", t.lr);
            r.get("batch_size", t.batch_size);
            r.get("seed", t.seed);
            r.finish();
        } else if (key == "defense") {
            SectionReader r(*it, "defense");
            auto& d = c.defense;
            r.get("method", d.method);
            r.get("r", d.cfg.r);
            r.get("alpha", d.cfg.alpha);
            r.get("iterations", d.cfg.iterations);
            r.get("lr", d.cfg.lr);
            r.get("batch_size", d.cfg.batch_size);
            r.get("seed", d.cfg.seed);
            r.get("prune_fraction", d.prune_fraction);
            r.finish();
        } else if (key == "analysis") {
            SectionReader r(*it, "analysis");
            r.get("enabled", c.analysis.enabled);
            r.get("layers", c.analysis.layers);
            r.get("profile_samples", c.analysis.profile_samples);
            r.finish();
        } else if (key == "eval") {
            SectionReader r(*it, "eval");
            r.get("output_dir", c.eval.output_dir);
            r.get("embeddings", c.eval.embeddings);
            r.finish();
        } else {
            throw ConfigError(key, "unknown section (expected corpus, attack, train, defense, analysis, eval)");
        }
    }
    validate(c);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Stages

/// Everything derived from the corpus and attack sections.
struct PreparedData {
    DatasetSplit split;
    Featurizer featurizer{MfccConfig{}};
    TriggerSpec trigger;  // resolved (auto value/position filled in)
    PoisonedSet poisoned;
    std::vector<FeatureMap> test;
    std::vector<FeatureMap> clean;  // D_c
    std::vector<FeatureMap> asr;
    std::vector<std::string> classes;
};

namespace detail {

inline std::uint64_t hash_features(std::uint64_t h, const std::vector<FeatureMap>& maps) {
    for (const auto& m : maps) {
        h = fnv1a(m.label, h);
        h = fnv1a(m.id, h);
        for (double v : m.values) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            h = fnv1a_u64(bits, h);
        }
    }
    return h;
}

inline std::string hex(std::uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace detail

inline std::vector<std::string> corpus_classes(const std::vector<AudioSample>& samples) {
    std::vector<std::string> out;
    for (const auto& s : samples)
        if (std::find(out.begin(), out.end(), s.label) == out.end()) out.push_back(s.label);
    return out;
}

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    const auto& k = cfg.corpus;
    std::vector<AudioSample> corpus =
        k.source == "synthetic"
            ? generate_synthetic_corpus(k.n_classes, k.n_per_class, k.seed, k.sample_rate, k.duration, k.labels)
            : load_directory_corpus(k.source);
    PreparedData d;
    d.classes = corpus_classes(corpus);
    if (k.source != "synthetic") std::sort(d.classes.begin(), d.classes.end());
    if (std::find(d.classes.begin(), d.classes.end(), cfg.attack.target) == d.classes.end())
        throw ConfigError("attack.target", "label '" + cfg.attack.target + "' is not one of the corpus classes");
    d.split = make_splits(corpus, k.test_fraction, k.clean_ratio, k.split_seed);
    d.featurizer = Featurizer(k.mfcc);
    d.featurizer.fit(d.split.train);

    d.trigger = cfg.attack.trigger;
    if (auto* b = std::get_if<SpecBlock>(&d.trigger)) {
        if (cfg.attack.auto_position) {
            b->row_offset = k.mfcc.n_mfcc - b->height;
            b->col_offset = k.mfcc.n_frames - b->width;
        }
        if (cfg.attack.auto_value) b->value = max_abs_coefficient(d.featurizer(d.split.train));
    }
    d.poisoned = poison_dataset(d.split, d.trigger, cfg.attack.ratio, cfg.attack.target, cfg.attack.seed, d.featurizer);
    d.test = d.featurizer(d.split.test);
    d.clean = d.featurizer(d.split.clean_defense);
    d.asr = build_asr_eval_set(d.split.test, d.trigger, cfg.attack.target, d.featurizer);
    return d;
}

inline Model build_model(const ExperimentConfig& cfg, const std::vector<std::string>& classes) {
    const auto& m = cfg.corpus.mfcc;
    ModelSpec spec;
    spec.arch = cfg.train.arch;
    spec.input = {1, m.n_mfcc, m.n_frames};
    spec.classes = classes;
    spec.conv_channels = cfg.train.arch == "small_cnn" ? cfg.train.channels : std::vector<std::size_t>{};
    spec.hidden = cfg.train.hidden;
    spec.head = cfg.train.arch == "small_cnn" ? cfg.train.head : "none";
    Model model(spec);
    model.initialize(cfg.train.seed);
    return model;
}

/// Cache key of the trained model: training section plus the exact poisoned
/// training features.
inline std::uint64_t train_key(const ExperimentConfig& cfg, const PreparedData& d) {
    std::uint64_t h = fnv1a(to_json(cfg)["train"].dump());
    for (const auto& c : d.classes) h = fnv1a(c, h);
    return detail::hash_features(h, d.poisoned.train);
}

inline std::uint64_t defense_key(const ExperimentConfig& cfg, const PreparedData& d, std::uint64_t model_key) {
    std::uint64_t h = fnv1a(to_json(cfg)["defense"].dump(), model_key);
    return detail::hash_features(h, d.clean);
}

/// Trains (or loads from `cache_dir`) the backdoored model.
inline Model train_stage(const ExperimentConfig& cfg, const PreparedData& d, const std::filesystem::path& cache_dir,
                         std::ostream* log = nullptr) {
    const auto key = train_key(cfg, d);
    const auto path = cache_dir / ("backdoored_" + detail::hex(key) + ".ckpt");
    Model model = build_model(cfg, d.classes);
    if (!cache_dir.empty() && std::filesystem::exists(path)) {
        if (log) *log << "train: cached " << path.string() << '\n';
        return checkpoint_load(path, model.spec());
    }
    if (log) *log << "train: " << cfg.train.epochs << " epochs on " << d.poisoned.train.size() << " samples\n";
    train(model, d.poisoned.train, {cfg.train.epochs, cfg.train.lr, cfg.train.batch_size, cfg.train.seed});
    if (!cache_dir.empty()) {
        std::filesystem::create_directories(cache_dir);
        checkpoint_save(model, path);
    }
    return model;
}

struct DefenseOutcome {
    Model model;
    DefenseTrace trace;
    std::vector<NeuronId> pruned;
};

inline DefenseOutcome run_defense(const ExperimentConfig& cfg, const Model& model,
                                  const std::vector<FeatureMap>& clean) {
    const auto& d = cfg.defense;
    if (d.method == "gnft") {
        auto [m, t] = run_gnft(model, clean, d.cfg);
        return {std::move(m), std::move(t), {}};
    }
    if (d.method == "ft") {
        auto [m, t] = run_vanilla_ft(model, clean, d.cfg);
        return {std::move(m), std::move(t), {}};
    }
    auto fp = run_fine_pruning(model, clean, d.prune_fraction, d.cfg);
    return {std::move(fp.model), std::move(fp.trace), std::move(fp.pruned)};
}

/// Defends (or loads from `cache_dir`) the given model.
inline DefenseOutcome defense_stage(const ExperimentConfig& cfg, const PreparedData& d, const Model& model,
                                    std::uint64_t model_key, const std::filesystem::path& cache_dir,
                                    std::ostream* log = nullptr) {
    const auto key = defense_key(cfg, d, model_key);
    const auto stem = cache_dir / ("defended_" + cfg.defense.method + "_" + detail::hex(key));
    const auto ckpt = stem.string() + ".ckpt", trace_csv = stem.string() + ".trace";
    if (!cache_dir.empty() && std::filesystem::exists(ckpt) && std::filesystem::exists(trace_csv)) {
        if (log) *log << "defend: cached " << ckpt << '\n';
        DefenseOutcome out{checkpoint_load(ckpt, model.spec()), {}, {}};
        std::ifstream in(trace_csv);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            TraceRow r;
            int deg = 0;
            if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%d", &r.iteration, &r.g1_norm, &r.g2_norm,
                            &r.step_norm, &r.loss, &deg) == 6) {
                r.degenerate = deg != 0;
                out.trace.rows.push_back(r);
            }
        }
        for (const auto& id : out.model.neurons())
            if (out.model.masked(id)) out.pruned.push_back(id);
        return out;
    }
    if (log)
        *log << "defend: " << cfg.defense.method << ", " << cfg.defense.cfg.iterations << " iterations on "
             << d.clean.size() << " clean samples\n";
    auto out = run_defense(cfg, model, d.clean);
    if (!cache_dir.empty()) {
        std::filesystem::create_directories(cache_dir);
        checkpoint_save(out.model, ckpt);
        std::ofstream os(trace_csv);
        write_trace_csv(out.trace, os);
    }
    return out;
}

inline std::vector<std::size_t> analysis_layers(const ExperimentConfig& cfg, const Model& model) {
    return cfg.analysis.layers.empty() ? last_conv_layers(model) : cfg.analysis.layers;
}

/// Zone classification with clean-gradient magnitudes filled in.
inline ZoneReport analyze_model(const ExperimentConfig& cfg, const PreparedData& d, const Model& model,
                                GradientProfile* profile = nullptr) {
    auto rep = classify_zones(model, analysis_layers(cfg, model), d.clean, d.trigger, cfg.attack.target);
    auto prof = gradient_profile(model, d.clean, rep.records, cfg.analysis.profile_samples);
    if (profile) *profile = std::move(prof);
    return rep;
}

// ---------------------------------------------------------------------------
// Full run

struct RunResult {
    ExperimentReport report;
    Model backdoored;
    DefenseOutcome defended;
    std::optional<ZoneReport> zones_before, zones_after;
};

inline std::string attack_descriptor(const ExperimentConfig& cfg) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s@%g->%s", trigger_kind(cfg.attack.trigger).c_str(), cfg.attack.ratio,
                  cfg.attack.target.c_str());
    return buf;
}

inline std::string defense_descriptor(const ExperimentConfig& cfg) {
    const auto& d = cfg.defense;
    char buf[160];
    if (d.method == "gnft")
        std::snprintf(buf, sizeof buf, "gnft(r=%g,alpha=%g,T=%zu)", d.cfg.r, d.cfg.alpha, d.cfg.iterations);
    else if (d.method == "ft")
        std::snprintf(buf, sizeof buf, "ft(T=%zu)", d.cfg.iterations);
    else
        std::snprintf(buf, sizeof buf, "fp(prune=%g,T=%zu)", d.prune_fraction, d.cfg.iterations);
    return buf;
}

inline std::vector<std::pair<std::string, std::uint64_t>> config_seeds(const ExperimentConfig& cfg) {
    return {{"corpus", cfg.corpus.seed},
            {"split", cfg.corpus.split_seed},
            {"poison", cfg.attack.seed},
            {"train", cfg.train.seed},
            {"defense", cfg.defense.cfg.seed}};
}

struct RunOptions {
    std::filesystem::path output_dir;  // empty: no artifacts
    std::filesystem::path cache_dir;   // empty: output_dir / "cache"
    std::ostream* log = nullptr;
};

namespace detail {

template <class F>
void write_file(const std::filesystem::path& path, F&& body) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write " + path.string());
    body(os);
    if (!os) throw InputError("failed writing " + path.string());
}

}  // namespace detail

/// Runs every stage in order, writing artifacts under opts.output_dir.
inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    validate(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    namespace fs = std::filesystem;
    const fs::path out = opts.output_dir;
    const fs::path cache = !opts.cache_dir.empty() ? opts.cache_dir : (out.empty() ? fs::path() : out / "cache");
    if (!out.empty()) fs::create_directories(out);
    const std::string echo = to_json(cfg).dump(2);
    if (!out.empty()) detail::write_file(out / "config.json", [&](std::ostream& os) { os << echo << '\n'; });

    auto* log = opts.log;
    if (log) *log << "corpus: preparing\n";
    auto data = prepare_data(cfg);
    if (!out.empty()) {
        write_manifest(data.split, out / "manifest.tsv");
        write_poison_plan(data.poisoned.plan, out / "poison_plan.txt");
    }

    RunResult res;
    res.backdoored = train_stage(cfg, data, cache, log);
    const auto mkey = train_key(cfg, data);
    if (!out.empty()) checkpoint_save(res.backdoored, out / "model_backdoored.ckpt");
    res.report.pre = evaluate(res.backdoored, data.test, data.asr, cfg.attack.target);

    const bool analyze = cfg.analysis.enabled && res.backdoored.n_conv_layers() > 0;
    GradientProfile profile;
    if (analyze) {
        if (log) *log << "analyze: backdoored model\n";
        res.zones_before = analyze_model(cfg, data, res.backdoored, &profile);
    }

    res.defended = defense_stage(cfg, data, res.backdoored, mkey, cache, log);
    res.report.post = evaluate(res.defended.model, data.test, data.asr, cfg.attack.target);
    if (analyze) {
        if (log) *log << "analyze: defended model\n";
        res.zones_after = analyze_model(cfg, data, res.defended.model);
    }

    res.report.attack = attack_descriptor(cfg);
    res.report.defense = defense_descriptor(cfg);
    res.report.config_echo = echo;
    res.report.seeds = config_seeds(cfg);
    res.report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out.empty()) {
        checkpoint_save(res.defended.model, out / "model_defended.ckpt");
        detail::write_file(out / "trace.csv", [&](std::ostream& os) { write_trace_csv(res.defended.trace, os); });
        detail::write_file(out / "metrics.csv", [&](std::ostream& os) {
            write_metrics_csv_header(os);
            write_metrics_csv_row(res.report, os);
        });
        detail::write_file(out / "report.txt", [&](std::ostream& os) { write_report_text(res.report, os); });
        if (analyze) {
            detail::write_file(out / "zones_before.csv",
                               [&](std::ostream& os) { write_records_csv(res.zones_before->records, os); });
            detail::write_file(out / "zones_after.csv",
                               [&](std::ostream& os) { write_records_csv(res.zones_after->records, os); });
            detail::write_file(out / "zone_counts_before.csv",
                               [&](std::ostream& os) { write_zone_counts(res.zones_before->summary, os); });
            detail::write_file(out / "zone_counts_after.csv",
                               [&](std::ostream& os) { write_zone_counts(res.zones_after->summary, os); });
            detail::write_file(out / "scatter_before.txt",
                               [&](std::ostream& os) { write_scatter(res.zones_before->records, os); });
            detail::write_file(out / "scatter_after.txt",
                               [&](std::ostream& os) { write_scatter(res.zones_after->records, os); });
            detail::write_file(out / "gradient_profile.csv", [&](std::ostream& os) {
                write_profile_csv(profile, res.zones_before->records, os);
            });
        }
        if (cfg.eval.embeddings) {
            detail::write_file(out / "embeddings_before.csv", [&](std::ostream& os) {
                write_embeddings_csv(export_embeddings(res.backdoored, data.poisoned.train, data.poisoned.poisoned), os);
            });
            detail::write_file(out / "embeddings_after.csv", [&](std::ostream& os) {
                write_embeddings_csv(
                    export_embeddings(res.defended.model, data.poisoned.train, data.poisoned.poisoned), os);
            });
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
    std::string axis;
    double value = 0.0;
    bool ok = false;
    std::string error;
    ExperimentReport report;
};

/// Returns `base` with one sweepable field replaced; throws ConfigError for an
/// unknown axis or an out-of-range value.
inline ExperimentConfig with_axis(ExperimentConfig base, const std::string& axis, double value) {
    if (axis == "clean_ratio") base.corpus.clean_ratio = value;
    else if (axis == "alpha") base.defense.cfg.alpha = value;
    else if (axis == "r") base.defense.cfg.r = value;
    else throw ConfigError("sweep.axis", "unknown axis '" + axis + "' (expected clean_ratio, alpha or r)");
    validate(base);
    return base;
}

/// One full run per value; shared training cache under opts.output_dir/cache.
/// A failing value produces an error row and the sweep continues.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::string& axis,
                                       const std::vector<double>& values, const RunOptions& opts = {}) {
    if (axis != "clean_ratio" && axis != "alpha" && axis != "r")
        throw ConfigError("sweep.axis", "unknown axis '" + axis + "' (expected clean_ratio, alpha or r)");
    std::vector<SweepRow> rows;
    for (double v : values) {
        SweepRow row{axis, v};
        try {
            auto cfg = with_axis(base, axis, v);
            RunOptions o = opts;
            if (!opts.output_dir.empty()) {
                char name[64];
                std::snprintf(name, sizeof name, "%s_%g", axis.c_str(), v);
                o.output_dir = opts.output_dir / name;
                o.cache_dir = opts.cache_dir.empty() ? opts.output_dir / "cache" : opts.cache_dir;
            }
            row.report = run_experiment(cfg, o).report;
            row.ok = true;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& os) {
    os << "axis,value,status,pre_ca,pre_asr,post_ca,post_asr,error\n";
    for (const auto& r : rows) {
        char v[32];
        std::snprintf(v, sizeof v, "%g", r.value);
        os << r.axis << ',' << v << ',' << (r.ok ? "ok" : "error") << ',';
        if (r.ok)
            os << pct(r.report.pre.ca) << ',' << pct(r.report.pre.asr) << ',' << pct(r.report.post.ca) << ','
               << pct(r.report.post.asr) << ",\n";
        else {
            std::string msg = r.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            os << ",,,," << msg << '\n';
        }
    }
}

}  // namespace gnft
