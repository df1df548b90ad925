#pragma once

// Clean accuracy, attack success rate, run comparison and exports.

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "gnft/corpus.hpp"
#include "gnft/error.hpp"
#include "gnft/model.hpp"

namespace gnft {

struct Metrics {
    double ca = 0.0;   // percent
    double asr = 0.0;  // percent
    std::size_t n_clean = 0;
    std::size_t n_asr = 0;
    bool operator==(const Metrics&) const = default;
};

inline double clean_accuracy(const Model& model, const std::vector<FeatureMap>& test) {
    detail::require(!test.empty(), "clean accuracy needs a nonempty test set");
    const auto r = model.forward_loss(test);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < test.size(); ++i) hit += r.predictions[i] == test[i].label;
    return 100.0 * double(hit) / double(test.size());
}

/// Share of `asr_set` classified as `target_label`. Labels in the set are the
/// true labels and are not used.
inline double attack_success_rate(const Model& model, const std::vector<FeatureMap>& asr_set,
                                  const std::string& target_label) {
    detail::require(!asr_set.empty(), "attack success rate needs a nonempty set");
    const auto target = model.class_index(target_label);
    std::size_t hit = 0;
    for (const auto& x : asr_set) hit += Model::argmax(model.logits(x)) == target;
    return 100.0 * double(hit) / double(asr_set.size());
}

inline Metrics evaluate(const Model& model, const std::vector<FeatureMap>& test, const std::vector<FeatureMap>& asr_set,
                        const std::string& target_label) {
    return {clean_accuracy(model, test), attack_success_rate(model, asr_set, target_label), test.size(),
            asr_set.size()};
}

// ---------------------------------------------------------------------------
// Embeddings

struct EmbeddingRow {
    std::string id;
    std::string label;
    bool poisoned = false;
    std::vector<double> features;
};

/// Penultimate-layer features (input of the classification head).
inline std::vector<EmbeddingRow> export_embeddings(const Model& model, const std::vector<FeatureMap>& samples,
                                                   const std::vector<char>& poisoned = {}) {
    detail::require(poisoned.empty() || poisoned.size() == samples.size(), "poisoned flags must match samples");
    std::vector<EmbeddingRow> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        out.push_back({samples[i].id, samples[i].label, !poisoned.empty() && poisoned[i] != 0,
                       model.embedding(samples[i])});
    return out;
}

inline void write_embeddings_csv(const std::vector<EmbeddingRow>& rows, std::ostream& os) {
    os << "id,label,poisoned";
    const std::size_t d = rows.empty() ? 0 : rows.front().features.size();
    for (std::size_t k = 0; k < d; ++k) os << ",f_" << k;
    os << '\n';
    char buf[32];
    for (const auto& r : rows) {
        os << r.id << ',' << r.label << ',' << (r.poisoned ? 1 : 0);
        for (double v : r.features) {
            std::snprintf(buf, sizeof buf, ",%.9g", v);
            os << buf;
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Reports

struct ExperimentReport {
    std::string attack;
    std::string defense;
    Metrics pre;
    Metrics post;
    std::string config_echo;  // resolved configuration, sufficient for replay
    std::vector<std::pair<std::string, std::uint64_t>> seeds;
    double runtime_seconds = 0.0;
};

struct RankingRow {
    std::string attack;
    std::string defense;
    Metrics pre;
    Metrics post;
    double delta_asr = 0.0;  // pre - post
    double delta_ca = 0.0;   // pre - post
};

/// Sorted by post-defense ASR ascending, then CA descending; ties keep input order.
inline std::vector<RankingRow> compare_runs(const std::vector<ExperimentReport>& reports) {
    std::vector<RankingRow> rows;
    for (const auto& r : reports)
        rows.push_back({r.attack, r.defense, r.pre, r.post, r.pre.asr - r.post.asr, r.pre.ca - r.post.ca});
    std::stable_sort(rows.begin(), rows.end(), [](const RankingRow& a, const RankingRow& b) {
        if (a.post.asr != b.post.asr) return a.post.asr < b.post.asr;
        return a.post.ca > b.post.ca;
    });
    return rows;
}

inline std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string raw(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Metrics columns: two-decimal percentages followed by full-precision raw values.
inline void write_metrics_csv_header(std::ostream& os) {
    os << "attack,defense,pre_ca,pre_asr,post_ca,post_asr,n_clean,n_asr,pre_ca_raw,pre_asr_raw,post_ca_raw,post_asr_raw\n";
}

inline void write_metrics_csv_row(const ExperimentReport& r, std::ostream& os) {
    os << r.attack << ',' << r.defense << ',' << pct(r.pre.ca) << ',' << pct(r.pre.asr) << ',' << pct(r.post.ca)
       << ',' << pct(r.post.asr) << ',' << r.post.n_clean << ',' << r.post.n_asr << ',' << raw(r.pre.ca) << ','
       << raw(r.pre.asr) << ',' << raw(r.post.ca) << ',' << raw(r.post.asr) << '\n';
}

inline void write_ranking_csv(const std::vector<RankingRow>& rows, std::ostream& os) {
    os << "rank,attack,defense,post_asr,post_ca,delta_asr,delta_ca\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
        os << i + 1 << ',' << rows[i].attack << ',' << rows[i].defense << ',' << pct(rows[i].post.asr) << ','
           << pct(rows[i].post.ca) << ',' << pct(rows[i].delta_asr) << ',' << pct(rows[i].delta_ca) << '\n';
}

/// Human-readable report with the full configuration echo.
inline void write_report_text(const ExperimentReport& r, std::ostream& os) {
    os << "attack: " << r.attack << "\ndefense: " << r.defense << '\n';
    os << "pre:  CA " << pct(r.pre.ca) << "  ASR " << pct(r.pre.asr) << "  (n_clean " << r.pre.n_clean << ", n_asr "
       << r.pre.n_asr << ")\n";
    os << "post: CA " << pct(r.post.ca) << "  ASR " << pct(r.post.asr) << "  (n_clean " << r.post.n_clean
       << ", n_asr " << r.post.n_asr << ")\n";
    os << "seeds:";
    for (auto& [k, v] : r.seeds) os << ' ' << k << '=' << v;
    os << "\nruntime_seconds: " << pct(r.runtime_seconds) << "\nconfig:\n" << r.config_echo << '\n';
}

}  // namespace gnft
