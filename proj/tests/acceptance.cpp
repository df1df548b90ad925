// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is 0 only when every evaluated criterion passes. `--only N`
// evaluates a single criterion; criteria that depend on the end-to-end run
// reuse (or rebuild) its cached artifacts under the work directory.

#include <cblas.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "gnft/experiment.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace gnft;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

int g_failed = 0, g_total = 0;
int g_only = 0;

void report(int id, const char* name, const Verdict& v, double seconds) {
    ++g_total;
    if (!v.pass) ++g_failed;
    std::printf("[%s] criterion %d: %s | %s | %.1fs\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str(),
                seconds);
    std::fflush(stdout);
}

void run(int id, const char* name, const std::function<Verdict()>& body) {
    if (g_only && g_only != id) return;
    const auto t0 = Clock::now();
    Verdict v;
    try {
        v = body();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    report(id, name, v, std::chrono::duration<double>(Clock::now() - t0).count());
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Shared state from the end-to-end run (criteria 5-8 and 10).
struct EndToEnd {
    bool done = false;
    ExperimentConfig cfg;
    RunResult gnft;
    Metrics ft_post;
    double seconds = 0.0;
};

}  // namespace

int main(int argc, char** argv) {
    openblas_set_num_threads(1);
    fs::path work = fs::temp_directory_path() / "gnft_acceptance";
    for (int i = 1; i < argc; ++i) {
        if (!std::strcmp(argv[i], "--workdir") && i + 1 < argc) work = argv[++i];
        else if (!std::strcmp(argv[i], "--only") && i + 1 < argc) g_only = std::atoi(argv[++i]);
        else {
            std::fprintf(stderr, "usage: %s [--workdir DIR] [--only N]\n", argv[0]);
            return 2;
        }
    }
    if (g_only < 0 || g_only > 10) {
        std::fprintf(stderr, "--only expects a criterion number 1..10\n");
        return 2;
    }
    if (!g_only) fs::remove_all(work);
    fs::create_directories(work);

    EndToEnd e2e;
    e2e.cfg = ExperimentConfig{};  // shipped defaults
    // Loads from the criterion-5 cache when present, otherwise recomputes.
    auto ensure_e2e = [&] {
        if (e2e.done) return;
        const auto t0 = Clock::now();
        e2e.gnft = run_experiment(e2e.cfg, {work / "gnft"});
        e2e.seconds = seconds_since(t0);
        e2e.done = true;
    };

    run(1, "gradient correctness", [] {
        auto m = build_reference_model("small_cnn", {1, 12, 10}, testutil::class_names(4), 17, {4, 6});
        auto batch = testutil::random_batch(8, 12, 10, testutil::class_names(4), 18);
        std::vector<double> g;
        m.loss_and_gradient(batch, g);
        std::mt19937_64 rng(19);
        std::uniform_int_distribution<std::size_t> pick(0, m.param_count() - 1);
        double worst = 0.0;
        std::size_t checked = 0;
        for (int tries = 0; tries < 200 && checked < 16; ++tries) {
            const auto k = pick(rng);
            if (std::abs(g[k]) < 1e-6) continue;
            worst = std::max(worst, testutil::rel_err(g[k], testutil::fd_partial(m, batch, k, 1e-4)));
            ++checked;
        }
        return Verdict{checked >= 10 && worst <= 1e-3,
                       fmt("%zu coordinates, max relative error %.2e (limit 1e-3)", checked, worst)};
    });

    run(2, "GN-FT step algebra", [] {
        const std::vector<double> theta{2.0};
        auto quad = [](std::span<const double> t, std::vector<double>& g) {
            g.assign(1, t[0]);
            return 0.5 * t[0] * t[0];
        };
        const auto d = gnft_direction(std::span<const double>(theta), quad, 0.05, 0.7);
        const double err = std::abs(d.g[0] - 2.035);

        auto m = build_reference_model("small_cnn", {1, 12, 10}, testutil::class_names(4), 21, {4, 6});
        auto data = testutil::random_batch(40, 12, 10, testutil::class_names(4), 22);
        DefenseConfig cfg;
        cfg.alpha = 0.0;
        cfg.iterations = 50;
        cfg.batch_size = 8;
        cfg.seed = 23;
        auto [a, ta] = run_gnft(m, data, cfg);
        Model ref = m;
        detail::BatchCycler batches(data, cfg.batch_size, cfg.seed);
        std::vector<double> grad;
        for (std::size_t t = 0; t < cfg.iterations; ++t) {
            ref.loss_and_gradient(batches.next(), grad);
            auto p = ref.params();
            for (std::size_t k = 0; k < p.size(); ++k) p[k] -= cfg.lr * grad[k];
        }
        const bool bit_exact = std::memcmp(a.params().data(), ref.params().data(), a.param_count() * sizeof(double)) == 0;
        return Verdict{err <= 1e-9 && bit_exact,
                       fmt("combined gradient %.12f (|err| %.1e), alpha=0 over 50 iterations bit-exact: %s", d.g[0],
                           err, bit_exact ? "yes" : "no")};
    });

    run(3, "regularizer fidelity", [] {
        auto tiny = build_reference_model("small_cnn", {1, 6, 4}, testutil::class_names(3), 1, {4});
        auto batch = testutil::random_batch(4, 6, 4, testutil::class_names(3), 2);
        const double e = testutil::regularizer_fd_error(tiny, batch, 0.05, 0.7);
        auto deeper = build_reference_model("small_cnn", {1, 6, 4}, testutil::class_names(3), 4, {2, 3});
        const double e_deep = testutil::regularizer_fd_error(deeper, batch, 0.05, 0.7);
        const double e_deep_small = testutil::regularizer_fd_error(deeper, batch, 0.01, 0.7);
        return Verdict{e <= 5e-2, fmt("one-conv tiny model r=0.05: %.3e (limit 5e-2); two-conv model r=0.05: %.3e, "
                                      "r=0.01: %.3e",
                                      e, e_deep, e_deep_small)};
    });

    run(4, "CLC/BLC oracle equivalence", [] {
        auto m = build_reference_model("small_cnn", {1, 12, 10}, testutil::class_names(4), 31, {4, 6});
        auto clean = testutil::random_batch(12, 12, 10, testutil::class_names(4), 32);
        const SpecBlock trig{8, 6, 4, 4, 3.0};
        auto bd = backdoor_inputs(clean, trig, "class2");
        const double base_c = m.forward_loss(clean).loss, base_b = m.forward_loss(bd).loss;
        auto rep = classify_zones(m, {0, 1}, clean, bd);
        double worst = 0.0;
        for (const auto& r : rep.records) {
            const auto z = m.zeroed_copy(r.id);
            const double cc = z.forward_loss(clean).loss - base_c, bb = z.forward_loss(bd).loss - base_b;
            worst = std::max({worst, testutil::rel_err(r.clc, cc, 1e-12), testutil::rel_err(r.blc, bb, 1e-12)});
        }
        struct Fx {
            double c, b;
            Zone z;
        };
        const Fx fixtures[] = {{0.3, -0.2, Zone::C}, {-0.3, 0.2, Zone::B}, {0.3, 0.2, Zone::H}, {-0.3, -0.2, Zone::R},
                               {0.0, 0.0, Zone::R},  {0.0, 0.5, Zone::B},  {0.5, 0.0, Zone::C}, {1e-300, 1e-300, Zone::H}};
        bool rule_ok = true;
        for (const auto& f : fixtures) rule_ok &= zone_of(f.c, f.b) == f.z;
        const bool total = rep.summary.total() == m.neurons().size();
        return Verdict{worst <= 1e-6 && rule_ok && total,
                       fmt("%zu neurons, max relative mask-vs-zero-copy gap %.2e (limit 1e-6); sign-rule fixtures: %s; "
                           "partition total: %s",
                           rep.records.size(), worst, rule_ok ? "ok" : "MISMATCH", total ? "yes" : "no")};
    });

    run(5, "end-to-end trend (GN-FT on spec_block, 10% poison)", [&] {
        fs::remove_all(work / "gnft");  // time a cold run
        ensure_e2e();
        const auto& pre = e2e.gnft.report.pre;
        const auto& post = e2e.gnft.report.post;
        const bool ok = pre.asr >= 90.0 && pre.ca >= 85.0 && post.asr <= 20.0 && post.ca >= pre.ca - 10.0 &&
                        e2e.seconds <= 900.0;
        return Verdict{ok, fmt("pre CA %.2f ASR %.2f -> post CA %.2f ASR %.2f (need pre ASR>=90, CA>=85; post ASR<=20, "
                               "CA drop<=10; runtime %.0fs <= 900s)",
                               pre.ca, pre.asr, post.ca, post.asr, e2e.seconds)};
    });

    run(6, "ablation trend (vanilla FT vs GN-FT)", [&] {
        ensure_e2e();
        if (!e2e.done) return Verdict{false, "criterion 5 run unavailable"};
        auto cfg = e2e.cfg;
        cfg.defense.method = "ft";
        cfg.analysis.enabled = false;
        e2e.ft_post = run_experiment(cfg, {work / "ft", work / "gnft" / "cache"}).report.post;
        const double gap = e2e.ft_post.asr - e2e.gnft.report.post.asr;
        return Verdict{gap >= 30.0, fmt("FT post ASR %.2f (CA %.2f) vs GN-FT post ASR %.2f: gap %.2f points (need >=30)",
                                        e2e.ft_post.asr, e2e.ft_post.ca, e2e.gnft.report.post.asr, gap)};
    });

    run(7, "gradient-profile observation", [&] {
        ensure_e2e();
        if (!e2e.done || !e2e.gnft.zones_before) return Verdict{false, "criterion 5 run unavailable"};
        std::vector<double> bh, c;
        for (const auto& r : e2e.gnft.zones_before->records) {
            if (r.zone == Zone::B || r.zone == Zone::H) bh.push_back(r.mean_grad_norm);
            if (r.zone == Zone::C) c.push_back(r.mean_grad_norm);
        }
        if (bh.empty() || c.empty()) return Verdict{false, fmt("empty zone: |B+H|=%zu |C|=%zu", bh.size(), c.size())};
        const double mbh = median(bh), mc = median(c);
        return Verdict{mbh > mc, fmt("median clean-gradient norm B+H %.4f (n=%zu) vs C %.4f (n=%zu); need B+H > C", mbh,
                                     bh.size(), mc, c.size())};
    });

    run(8, "zone migration", [&] {
        ensure_e2e();
        if (!e2e.done || !e2e.gnft.zones_before || !e2e.gnft.zones_after)
            return Verdict{false, "criterion 5 run unavailable"};
        const auto& b = e2e.gnft.zones_before->summary;
        const auto& a = e2e.gnft.zones_after->summary;
        return Verdict{a.backdoor_related() <= b.backdoor_related(),
                       fmt("B+H in last two conv layers: %zu (B %zu, H %zu) -> %zu (B %zu, H %zu)", b.backdoor_related(),
                           b.counts.at(Zone::B), b.counts.at(Zone::H), a.backdoor_related(), a.counts.at(Zone::B),
                           a.counts.at(Zone::H))};
    });

    run(9, "clean-ratio monotone trend", [&] {
        auto cfg = ExperimentConfig{};
        cfg.analysis.enabled = false;
        cfg.eval.embeddings = false;
        auto rows = run_sweep(cfg, "clean_ratio", {0.02, 0.05, 0.20}, {work / "sweep", work / "gnft" / "cache"});
        std::string d;
        for (const auto& r : rows)
            d += r.ok ? fmt("%g: CA %.2f ASR %.2f; ", r.value, r.report.post.ca, r.report.post.asr)
                      : fmt("%g: error %s; ", r.value, r.error.c_str());
        const bool ok = rows.size() == 3 && rows[0].ok && rows[2].ok && rows[2].report.post.ca >= rows[0].report.post.ca;
        return Verdict{ok, d + "need CA(0.20) >= CA(0.02)"};
    });

    run(10, "determinism and replay", [&] {
        ensure_e2e();
        if (!e2e.done) return Verdict{false, "criterion 5 run unavailable"};
        // Fresh directory and cache: every stage is recomputed.
        fs::remove_all(work / "rerun");
        run_experiment(e2e.cfg, {work / "rerun"});
        const auto m1 = slurp(work / "gnft" / "metrics.csv"), m2 = slurp(work / "rerun" / "metrics.csv");
        const bool same_metrics = !m1.empty() && m1 == m2;

        auto data = prepare_data(e2e.cfg);
        std::stringstream plan_text;
        write_poison_plan(data.poisoned.plan, plan_text);
        const auto plan = read_poison_plan(plan_text);
        auto replay = apply_poison_plan(data.split, plan, data.featurizer);
        bool same_set = replay.poisoned == data.poisoned.poisoned && replay.train.size() == data.poisoned.train.size();
        for (std::size_t i = 0; same_set && i < replay.train.size(); ++i)
            same_set = replay.train[i].values == data.poisoned.train[i].values &&
                       replay.train[i].label == data.poisoned.train[i].label;
        return Verdict{same_metrics && same_set,
                       fmt("metrics rows byte-identical on rerun: %s; replayed plan (%zu ids) reproduces poisoned set: %s",
                           same_metrics ? "yes" : "no", plan.poisoned_ids.size(), same_set ? "yes" : "no")};
    });

    std::printf("acceptance: %d/%d criteria pass\n", g_total - g_failed, g_total);
    return g_failed ? 1 : 0;
}
