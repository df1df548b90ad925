// gnft: command-line driver for backdoor-repair experiments.
//
// Exit status: 0 success, 1 runtime/input failure, 2 invalid arguments or config.

#include <cblas.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "gnft/experiment.hpp"

namespace fs = std::filesystem;
using namespace gnft;

namespace {

struct Common {
    std::string config;
    std::string output;
    bool quiet = false;
};

ExperimentConfig load(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (!c.output.empty()) cfg.eval.output_dir = c.output;
    validate(cfg);
    return cfg;
}

std::ostream* log_stream(const Common& c) { return c.quiet ? nullptr : &std::cerr; }

void print_metrics(const char* what, const Metrics& m) {
    std::cout << what << ": CA " << pct(m.ca) << "  ASR " << pct(m.asr) << "  (n_clean " << m.n_clean << ", n_asr "
              << m.n_asr << ")\n";
}

template <class F>
void write_to(const fs::path& p, F&& body) {
    std::ofstream os(p);
    if (!os) throw InputError("cannot write " + p.string());
    body(os);
}

Model load_checkpoint_for(const ExperimentConfig& cfg, const PreparedData& d, const std::string& path) {
    if (!fs::exists(path)) throw InputError("checkpoint not found: " + path);
    return checkpoint_load(path, build_model(cfg, d.classes).spec());
}

int cmd_run(const Common& c) {
    auto cfg = load(c);
    auto res = run_experiment(cfg, {cfg.eval.output_dir, {}, log_stream(c)});
    print_metrics("pre ", res.report.pre);
    print_metrics("post", res.report.post);
    std::cout << "artifacts: " << cfg.eval.output_dir << '\n';
    return 0;
}

int cmd_poison(const Common& c) {
    auto cfg = load(c);
    auto d = prepare_data(cfg);
    const fs::path out = cfg.eval.output_dir;
    fs::create_directories(out);
    write_manifest(d.split, out / "manifest.tsv");
    write_poison_plan(d.poisoned.plan, out / "poison_plan.txt");
    std::cout << "poisoned " << d.poisoned.plan.poisoned_ids.size() << " of " << d.poisoned.train.size()
              << " training samples; wrote " << (out / "poison_plan.txt").string() << '\n';
    return 0;
}

int cmd_train(const Common& c) {
    auto cfg = load(c);
    auto d = prepare_data(cfg);
    const fs::path out = cfg.eval.output_dir;
    fs::create_directories(out);
    auto m = train_stage(cfg, d, out / "cache", log_stream(c));
    checkpoint_save(m, out / "model_backdoored.ckpt");
    print_metrics("trained", evaluate(m, d.test, d.asr, cfg.attack.target));
    return 0;
}

int cmd_defend(const Common& c, const std::string& checkpoint) {
    auto cfg = load(c);
    auto d = prepare_data(cfg);
    auto m = load_checkpoint_for(cfg, d, checkpoint);
    const fs::path out = cfg.eval.output_dir;
    fs::create_directories(out);
    auto res = run_defense(cfg, m, d.clean);
    checkpoint_save(res.model, out / "model_defended.ckpt");
    write_to(out / "trace.csv", [&](std::ostream& os) { write_trace_csv(res.trace, os); });
    print_metrics("before", evaluate(m, d.test, d.asr, cfg.attack.target));
    print_metrics("after ", evaluate(res.model, d.test, d.asr, cfg.attack.target));
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, bool embeddings) {
    auto cfg = load(c);
    auto d = prepare_data(cfg);
    auto m = load_checkpoint_for(cfg, d, checkpoint);
    const auto met = evaluate(m, d.test, d.asr, cfg.attack.target);
    print_metrics("eval", met);
    if (embeddings) {
        const fs::path out = cfg.eval.output_dir;
        fs::create_directories(out);
        write_to(out / "embeddings.csv", [&](std::ostream& os) {
            write_embeddings_csv(export_embeddings(m, d.poisoned.train, d.poisoned.poisoned), os);
        });
    }
    return 0;
}

int cmd_analyze(const Common& c, const std::string& checkpoint, const std::vector<std::size_t>& layers,
                bool layers_given, const std::string& tag) {
    auto cfg = load(c);
    if (layers_given) {
        if (layers.empty()) throw ArgumentError("--layers must name at least one conv layer");
        cfg.analysis.layers = layers;
    }
    auto d = prepare_data(cfg);
    auto m = load_checkpoint_for(cfg, d, checkpoint);
    GradientProfile prof;
    auto rep = analyze_model(cfg, d, m, &prof);
    const fs::path out = cfg.eval.output_dir;
    fs::create_directories(out);
    const std::string sfx = tag.empty() ? "" : "_" + tag;
    write_to(out / ("zones" + sfx + ".csv"), [&](std::ostream& os) { write_records_csv(rep.records, os); });
    write_to(out / ("zone_counts" + sfx + ".csv"), [&](std::ostream& os) { write_zone_counts(rep.summary, os); });
    write_to(out / ("scatter" + sfx + ".txt"), [&](std::ostream& os) { write_scatter(rep.records, os); });
    write_to(out / ("gradient_profile" + sfx + ".csv"),
             [&](std::ostream& os) { write_profile_csv(prof, rep.records, os); });
    const auto& k = rep.summary.counts;
    std::cout << "zones: C " << k.at(Zone::C) << "  B " << k.at(Zone::B) << "  H " << k.at(Zone::H) << "  R "
              << k.at(Zone::R) << "  (total " << rep.summary.total() << ")\n";
    return 0;
}

int cmd_sweep(const Common& c, const std::string& axis, const std::vector<double>& values) {
    auto cfg = load(c);
    const fs::path out = cfg.eval.output_dir;
    fs::create_directories(out);
    auto rows = run_sweep(cfg, axis, values, {out, {}, log_stream(c)});
    write_to(out / ("sweep_" + axis + ".csv"), [&](std::ostream& os) { write_sweep_csv(rows, os); });
    write_sweep_csv(rows, std::cout);
    for (const auto& r : rows)
        if (!r.ok) return 1;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    openblas_set_num_threads(1);
    CLI::App app{"Backdoor analysis and gradient-norm regularized fine-tuning for keyword spotting"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config, "Experiment config (JSON); built-in defaults if omitted");
        sub->add_option("-o,--output", common.output, "Override eval.output_dir");
        sub->add_flag("-q,--quiet", common.quiet, "Suppress stage progress on stderr");
    };

    auto* run = app.add_subcommand("run", "All stages: corpus, poison, train, analyze, defend, eval");
    add_common(run);
    auto* poison = app.add_subcommand("poison", "Build the corpus split and poison plan");
    add_common(poison);
    auto* trn = app.add_subcommand("train", "Train the backdoored model on the poisoned set");
    add_common(trn);

    std::string checkpoint;
    auto* defend = app.add_subcommand("defend", "Apply the configured defense to a checkpoint");
    add_common(defend);
    defend->add_option("checkpoint", checkpoint, "Model checkpoint")->required();

    bool embeddings = false;
    auto* ev = app.add_subcommand("eval", "Clean accuracy and attack success rate of a checkpoint");
    add_common(ev);
    ev->add_option("checkpoint", checkpoint, "Model checkpoint")->required();
    ev->add_flag("--embeddings", embeddings, "Also export penultimate-layer embeddings");

    std::vector<std::size_t> layers;
    std::string tag;
    auto* an = app.add_subcommand("analyze", "Neuron zones and clean-gradient profile of a checkpoint");
    add_common(an);
    an->add_option("checkpoint", checkpoint, "Model checkpoint")->required();
    auto* layers_opt = an->add_option("--layers", layers, "Conv layer indices (default: last two)");
    layers_opt->expected(0, -1);
    an->add_option("--tag", tag, "Suffix for output file names");

    std::string axis;
    std::vector<double> values;
    auto* sw = app.add_subcommand("sweep", "One full run per value of a config axis");
    add_common(sw);
    sw->add_option("axis", axis, "clean_ratio | alpha | r")->required();
    sw->add_option("values", values, "Values to sweep")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) return cmd_run(common);
        if (*poison) return cmd_poison(common);
        if (*trn) return cmd_train(common);
        if (*defend) return cmd_defend(common, checkpoint);
        if (*ev) return cmd_eval(common, checkpoint, embeddings);
        if (*an) return cmd_analyze(common, checkpoint, layers, layers_opt->count() > 0, tag);
        if (*sw) return cmd_sweep(common, axis, values);
    } catch (const ArgumentError& e) {
        std::cerr << "gnft: invalid configuration: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "gnft: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
