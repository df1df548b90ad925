#pragma once

// Audio corpus ingestion, MFCC feature maps and train/test/defense splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gnft/error.hpp"
#include "gnft/hash.hpp"
#include "gnft/mfcc.hpp"
#include "gnft/wav.hpp"

namespace gnft {

struct AudioSample {
    std::vector<double> waveform;  // values in [-1, 1]
    double sample_rate = 16000.0;
    std::string label;
    std::string id;
    std::string source;  // file path or generator parameters, for manifests

    void validate() const {
        detail::require(sample_rate > 0.0, "sample " + id + ": sample_rate must be positive");
        detail::require(!waveform.empty(), "sample " + id + ": empty waveform");
        for (double v : waveform)
            detail::require(std::isfinite(v) && v >= -1.0 && v <= 1.0, "sample " + id + ": waveform outside [-1, 1]");
    }
};

/// Row-major [n_mfcc x n_frames] time-frequency map; value(c, t) = values[c * n_frames + t].
struct FeatureMap {
    std::size_t n_mfcc = 0;
    std::size_t n_frames = 0;
    std::vector<double> values;
    std::string label;
    std::string id;

    double& at(std::size_t coef, std::size_t frame) { return values[coef * n_frames + frame]; }
    double at(std::size_t coef, std::size_t frame) const { return values[coef * n_frames + frame]; }
    bool same_shape(const FeatureMap& o) const { return n_mfcc == o.n_mfcc && n_frames == o.n_frames; }
};

struct DatasetSplit {
    std::vector<AudioSample> train;
    std::vector<AudioSample> test;
    std::vector<AudioSample> clean_defense;  // D_c, drawn from train
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthParams {
    std::uint64_t seed = 0;
    std::size_t class_index = 0;
    std::size_t sample_index = 0;
    double sample_rate = 16000.0;
    double duration = 1.0;
};

inline std::string synth_label(std::size_t k, const std::vector<std::string>& labels) {
    return k < labels.size() ? labels[k] : "class" + std::to_string(k);
}

inline std::string format_synth_source(const SynthParams& p) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "synth:seed=%llu;class=%zu;index=%zu;sr=%.17g;dur=%.17g",
                  static_cast<unsigned long long>(p.seed), p.class_index, p.sample_index, p.sample_rate, p.duration);
    return buf;
}

inline SynthParams parse_synth_source(const std::string& s) {
    SynthParams p;
    unsigned long long seed = 0;
    if (std::sscanf(s.c_str(), "synth:seed=%llu;class=%zu;index=%zu;sr=%lf;dur=%lf", &seed, &p.class_index,
                    &p.sample_index, &p.sample_rate, &p.duration) != 5)
        throw FormatError("malformed synthetic source descriptor: " + s);
    p.seed = seed;
    return p;
}

/// One synthetic keyword-like waveform. Class k is a harmonic tone at a
/// geometrically spaced fundamental with a class-specific chirp; per-sample jitter, onset and Gaussian noise (20 dB SNR) are drawn
/// from a stream keyed by (seed, class, index), so generation order is irrelevant.
inline std::vector<double> synthesize_waveform(const SynthParams& p) {
    const auto n = static_cast<std::size_t>(std::llround(p.duration * p.sample_rate));
    detail::require(n > 0, "synthetic duration yields no samples");
    std::mt19937_64 rng(derive_seed(p.seed, "synth/" + std::to_string(p.class_index) + "/" +
                                                std::to_string(p.sample_index)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Classes differ only in pitch (8% steps, overlapping under +-4% jitter)
    // and a weak three-way chirp, so the task is not trivially separable.
    const auto k = double(p.class_index);
    const double f0 = 250.0 * std::pow(1.08, k) * (1.0 + 0.08 * (unit(rng) - 0.5));
    static constexpr double kChirp[3] = {-0.075, 0.0, 0.075};
    const double chirp = kChirp[p.class_index % 3];
    const double h2 = 0.3, h3 = 0.1;
    const double amp = 0.3 + 0.3 * unit(rng);
    const double onset = 0.05 * unit(rng);
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    const double attack = 0.02;

    std::vector<double> w(n);
    double power = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = double(i) / p.sample_rate;
        double env = 0.0;
        if (t >= onset) env = std::min(1.0, (t - onset) / attack);
        const double ph = 2.0 * std::numbers::pi * f0 * (t + 0.5 * chirp * t * t) + phase;
        const double s = (std::sin(ph) + h2 * std::sin(2.0 * ph) + h3 * std::sin(3.0 * ph)) / (1.0 + h2 + h3);
        w[i] = amp * env * s;
        power += w[i] * w[i];
    }
    power /= double(n);
    std::normal_distribution<double> noise(0.0, std::sqrt(power / 100.0));
    for (double& v : w) v = std::clamp(v + noise(rng), -1.0, 1.0);
    return w;
}

inline AudioSample make_synthetic_sample(const SynthParams& p, const std::string& label) {
    AudioSample s;
    s.waveform = synthesize_waveform(p);
    s.sample_rate = p.sample_rate;
    s.label = label;
    char idx[16];
    std::snprintf(idx, sizeof idx, "%04zu", p.sample_index);
    s.id = label + "/" + idx;
    s.source = format_synth_source(p);
    return s;
}

/// n_classes x n_per_class samples, class-major order. Labels default to
/// "class<k>"; `labels` overrides the first labels.size() names.
inline std::vector<AudioSample> generate_synthetic_corpus(std::size_t n_classes, std::size_t n_per_class,
                                                          std::uint64_t seed, double sample_rate, double duration,
                                                          const std::vector<std::string>& labels = {}) {
    detail::require(n_classes >= 2, "n_classes must be >= 2");
    detail::require(n_per_class >= 1, "n_per_class must be >= 1");
    detail::require(duration > 0.0, "duration must be positive");
    detail::require(sample_rate > 0.0, "sample_rate must be positive");
    std::vector<AudioSample> out;
    out.reserve(n_classes * n_per_class);
    for (std::size_t k = 0; k < n_classes; ++k)
        for (std::size_t i = 0; i < n_per_class; ++i)
            out.push_back(make_synthetic_sample({seed, k, i, sample_rate, duration}, synth_label(k, labels)));
    return out;
}

// ---------------------------------------------------------------------------
// Directory corpus: <root>/<class>/<file>.wav

inline AudioSample load_wav_sample(const std::filesystem::path& file, const std::string& label,
                                   const std::string& id) {
    auto pcm = wav::read(file);
    AudioSample s;
    s.waveform = std::move(pcm.samples);
    s.sample_rate = pcm.sample_rate;
    s.label = label;
    s.id = id;
    s.source = file.string();
    return s;
}

inline std::vector<AudioSample> load_directory_corpus(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw InputError("corpus root is not a directory: " + root.string());
    std::vector<fs::path> files;
    for (const auto& cls : fs::directory_iterator(root)) {
        if (!cls.is_directory()) continue;
        for (const auto& f : fs::directory_iterator(cls.path())) {
            if (!f.is_regular_file()) continue;
            auto ext = f.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
            if (ext == ".wav") files.push_back(f.path());
        }
    }
    if (files.empty()) throw InputError("no .wav files under corpus root: " + root.string());
    std::sort(files.begin(), files.end());
    std::vector<AudioSample> out;
    out.reserve(files.size());
    for (const auto& f : files) {
        const std::string label = f.parent_path().filename().string();
        out.push_back(load_wav_sample(f, label, label + "/" + f.filename().string()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Features

inline FeatureMap extract_mfcc(const AudioSample& sample, const MfccExtractor& extractor) {
    FeatureMap fm;
    fm.n_mfcc = extractor.config().n_mfcc;
    fm.n_frames = extractor.config().n_frames;
    fm.values = extractor.compute(sample.waveform);
    fm.label = sample.label;
    fm.id = sample.id;
    return fm;
}

inline FeatureMap extract_mfcc(const AudioSample& sample, std::size_t n_mfcc, std::size_t frame_len,
                               std::size_t hop, std::size_t n_frames_target) {
    MfccConfig cfg;
    cfg.n_mfcc = n_mfcc;
    cfg.frame_len = frame_len;
    cfg.hop = hop;
    cfg.n_frames = n_frames_target;
    cfg.n_mels = std::max<std::size_t>(cfg.n_mels, n_mfcc);
    cfg.validate();
    detail::require(!sample.waveform.empty() && sample.sample_rate > 0.0, "invalid sample " + sample.id);
    return extract_mfcc(sample, MfccExtractor(cfg, sample.sample_rate));
}

/// Per-coefficient standardization fitted on a reference (clean training) set.
struct FeatureNormalizer {
    std::vector<double> mean;
    std::vector<double> inv_std;

    static FeatureNormalizer fit(const std::vector<FeatureMap>& maps) {
        detail::require(!maps.empty(), "cannot fit normalizer on an empty set");
        const std::size_t C = maps.front().n_mfcc, T = maps.front().n_frames;
        FeatureNormalizer n;
        n.mean.assign(C, 0.0);
        n.inv_std.assign(C, 1.0);
        std::vector<double> sq(C, 0.0);
        for (const auto& m : maps) {
            detail::require(m.n_mfcc == C && m.n_frames == T, "inconsistent feature shapes in " + m.id);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < T; ++t) n.mean[c] += m.at(c, t);
        }
        const double count = double(maps.size() * T);
        for (double& v : n.mean) v /= count;
        for (const auto& m : maps)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < T; ++t) {
                    const double d = m.at(c, t) - n.mean[c];
                    sq[c] += d * d;
                }
        for (std::size_t c = 0; c < C; ++c) {
            const double sd = std::sqrt(sq[c] / count);
            n.inv_std[c] = sd > 1e-12 ? 1.0 / sd : 1.0;
        }
        return n;
    }

    FeatureMap apply(FeatureMap m) const {
        detail::require(m.n_mfcc == mean.size(), "normalizer/feature coefficient mismatch for " + m.id);
        for (std::size_t c = 0; c < m.n_mfcc; ++c)
            for (std::size_t t = 0; t < m.n_frames; ++t) m.at(c, t) = (m.at(c, t) - mean[c]) * inv_std[c];
        return m;
    }
};

/// MFCC extraction followed by standardization. Extractors are cached per
/// sample rate; not thread-safe.
class Featurizer {
public:
    Featurizer(MfccConfig cfg, FeatureNormalizer norm = {}) : cfg_(cfg), norm_(std::move(norm)) { cfg_.validate(); }

    const MfccConfig& config() const { return cfg_; }
    const FeatureNormalizer& normalizer() const { return norm_; }
    void set_normalizer(FeatureNormalizer n) { norm_ = std::move(n); }

    FeatureMap raw(const AudioSample& s) {
        auto it = extractors_.find(s.sample_rate);
        if (it == extractors_.end())
            it = extractors_.emplace(s.sample_rate, std::make_unique<MfccExtractor>(cfg_, s.sample_rate)).first;
        return extract_mfcc(s, *it->second);
    }

    FeatureMap operator()(const AudioSample& s) {
        auto fm = raw(s);
        return norm_.mean.empty() ? fm : norm_.apply(std::move(fm));
    }

    std::vector<FeatureMap> operator()(const std::vector<AudioSample>& samples) {
        std::vector<FeatureMap> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back((*this)(s));
        return out;
    }

    /// Fits the normalizer on `reference` and returns it.
    const FeatureNormalizer& fit(const std::vector<AudioSample>& reference) {
        std::vector<FeatureMap> raws;
        raws.reserve(reference.size());
        for (const auto& s : reference) raws.push_back(raw(s));
        norm_ = FeatureNormalizer::fit(raws);
        return norm_;
    }

private:
    MfccConfig cfg_;
    FeatureNormalizer norm_;
    std::map<double, std::unique_ptr<MfccExtractor>> extractors_;
};

// ---------------------------------------------------------------------------
// Splits

namespace detail {

// Largest-remainder apportionment of round(frac * total) over groups.
inline std::vector<std::size_t> apportion(const std::vector<std::size_t>& sizes, double frac) {
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    const auto target = static_cast<std::size_t>(std::llround(frac * double(total)));
    std::vector<std::size_t> q(sizes.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        const double exact = frac * double(sizes[i]);
        q[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += q[i];
        rem.emplace_back(exact - double(q[i]), i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < target && r < rem.size(); ++r) {
        if (q[rem[r].second] < sizes[rem[r].second]) {
            ++q[rem[r].second];
            ++assigned;
        }
    }
    return q;
}

}  // namespace detail

/// Stratified train/test split plus a stratified defender subset D_c drawn
/// from train. Train and test depend only on (corpus, test_frac, seed), so
/// varying clean_ratio leaves them unchanged. Outputs keep corpus order.
inline DatasetSplit make_splits(const std::vector<AudioSample>& corpus, double test_frac, double clean_ratio,
                                std::uint64_t seed) {
    detail::require(test_frac > 0.0 && test_frac < 1.0, "test_frac must be in (0, 1)");
    detail::require(clean_ratio > 0.0 && clean_ratio <= 1.0, "clean_ratio must be in (0, 1]");
    detail::require(!corpus.empty(), "empty corpus");

    std::map<std::string, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < corpus.size(); ++i) by_class[corpus[i].label].push_back(i);
    std::vector<std::size_t> sizes;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < 2)
            throw StratificationError("class '" + label + "' has " + std::to_string(idx.size()) +
                                      " sample(s); at least 2 are required to stratify");
        sizes.push_back(idx.size());
    }

    auto test_q = detail::apportion(sizes, test_frac);
    std::vector<char> is_test(corpus.size(), 0), is_clean(corpus.size(), 0);
    std::vector<std::vector<std::size_t>> train_by_class;
    std::size_t ci = 0;
    for (auto& [label, idx] : by_class) {
        auto order = idx;
        std::mt19937_64 rng(derive_seed(seed, "test/" + label));
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t nt = std::clamp<std::size_t>(test_q[ci], 1, order.size() - 1);
        for (std::size_t k = 0; k < nt; ++k) is_test[order[k]] = 1;
        std::vector<std::size_t> tr;
        for (std::size_t i : idx)
            if (!is_test[i]) tr.push_back(i);
        train_by_class.push_back(std::move(tr));
        ++ci;
    }

    std::vector<std::size_t> train_sizes;
    for (auto& t : train_by_class) train_sizes.push_back(t.size());
    auto clean_q = detail::apportion(train_sizes, clean_ratio);
    ci = 0;
    for (auto& [label, idx] : by_class) {
        auto order = train_by_class[ci];
        std::mt19937_64 rng(derive_seed(seed, "clean/" + label));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t k = 0; k < clean_q[ci]; ++k) is_clean[order[k]] = 1;
        ++ci;
    }

    DatasetSplit out;
    out.seed = seed;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (is_test[i]) {
            out.test.push_back(corpus[i]);
        } else {
            out.train.push_back(corpus[i]);
            if (is_clean[i]) out.clean_defense.push_back(corpus[i]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest: one tab-separated record per sample.
//
//   # gnft corpus manifest v1
//   # seed <split seed>
//   <id> \t <label> \t <train|clean|test> \t <source>
//
// "clean" marks a training sample that is also in D_c. <source> is either a
// file path or a "synth:..." generator descriptor.

inline void write_manifest(const DatasetSplit& split, std::ostream& os) {
    os << "# gnft corpus manifest v1\n# seed " << split.seed << "\n";
    std::map<std::string, bool> clean;
    for (const auto& s : split.clean_defense) clean[s.id] = true;
    for (const auto& s : split.train)
        os << s.id << '\t' << s.label << '\t' << (clean.count(s.id) ? "clean" : "train") << '\t' << s.source << '\n';
    for (const auto& s : split.test) os << s.id << '\t' << s.label << "\ttest\t" << s.source << '\n';
}

inline void write_manifest(const DatasetSplit& split, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write manifest: " + path.string());
    write_manifest(split, os);
}

inline DatasetSplit read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open manifest: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "# gnft corpus manifest v1")
        throw FormatError("missing manifest header in " + path.string());
    DatasetSplit out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            unsigned long long seed = 0;
            if (std::sscanf(line.c_str(), "# seed %llu", &seed) == 1) out.seed = seed;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, '\t')) f.push_back(field);
        if (f.size() != 4) throw FormatError("manifest record needs 4 fields: " + line);
        AudioSample s;
        if (f[3].rfind("synth:", 0) == 0) {
            s = make_synthetic_sample(parse_synth_source(f[3]), f[1]);
        } else {
            s = load_wav_sample(f[3], f[1], f[0]);
        }
        s.id = f[0];
        if (f[2] == "test") {
            out.test.push_back(std::move(s));
        } else if (f[2] == "train" || f[2] == "clean") {
            if (f[2] == "clean") out.clean_defense.push_back(s);
            out.train.push_back(std::move(s));
        } else {
            throw FormatError("unknown split '" + f[2] + "' in manifest " + path.string());
        }
    }
    return out;
}

}  // namespace gnft
