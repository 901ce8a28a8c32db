// Command-line surface: dataset generation, training, inference, evaluation,
// the ablation matrix, calibration diagnostics, the NFA curve, and the
// self-check suites. Every run writes a descriptor (config + seed) so it can
// be replayed to identical outputs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nfaseg/checkpoint.hpp"
#include "nfaseg/config.hpp"
#include "nfaseg/data.hpp"
#include "nfaseg/eval.hpp"
#include "nfaseg/gradcheck.hpp"
#include "nfaseg/image_io.hpp"
#include "nfaseg/network.hpp"
#include "nfaseg/train.hpp"

namespace {

using namespace nfaseg;

constexpr const char* kVersion = "0.1.0";
constexpr unsigned long long kNetStream = 0x6e6574ULL;

int exit_code_for(ErrorCode c) {
    switch (c) {
        case ErrorCode::Parameter: return 2;
        case ErrorCode::Domain: return 3;
        case ErrorCode::Numerical: return 4;
        case ErrorCode::Format: return 5;
        case ErrorCode::Io: return 6;
        case ErrorCode::Config: return 7;
    }
    return 10;
}

std::string one_line(std::string s) {
    for (auto& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Flags {
    std::string config_path;
    std::string out_dir = ".";
    unsigned long long seed = 0;
    double threshold = 0.0;
    double alpha = 0.0;
    double reg_weight = 0.0;
    std::string sigma_form, reduce, eca, spatial, multiscale;
    CLI::Option* o_threshold = nullptr;
    CLI::Option* o_alpha = nullptr;
    CLI::Option* o_reg = nullptr;
    CLI::Option* o_form = nullptr;
    CLI::Option* o_reduce = nullptr;
    CLI::Option* o_eca = nullptr;
    CLI::Option* o_spatial = nullptr;
    CLI::Option* o_multiscale = nullptr;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config_path, "configuration file (key = value)");
    cmd->add_option("--seed", f.seed, "master seed for this run");
    cmd->add_option("--out-dir", f.out_dir, "directory for outputs");
    f.o_threshold =
        cmd->add_option("--threshold", f.threshold, "score binarization threshold");
    f.o_alpha = cmd->add_option("--alpha", f.alpha, "activation slope");
    f.o_form = cmd->add_option("--sigma-form", f.sigma_form, "covariance form")
                   ->check(CLI::IsMember({"spherical", "elliptical", "dense"}));
    f.o_reduce = cmd->add_option("--reduce", f.reduce, "scale fusion rule")
                     ->check(CLI::IsMember({"min", "max"}));
    f.o_eca = cmd->add_option("--eca", f.eca, "scale weighting on/off")
                  ->check(CLI::IsMember({"on", "off"}));
    f.o_spatial = cmd->add_option("--spatial", f.spatial, "attention block on/off")
                      ->check(CLI::IsMember({"on", "off"}));
    f.o_reg =
        cmd->add_option("--reg-weight", f.reg_weight, "gradient regularizer weight");
    f.o_multiscale =
        cmd->add_option("--multiscale", f.multiscale, "scale fusion on/off")
            ->check(CLI::IsMember({"on", "off"}));
}

Config effective_config(const Flags& f) {
    Config cfg =
        f.config_path.empty() ? Config() : load_config_file(f.config_path);
    if (*f.o_threshold) {
        cfg.set("train.threshold", fmt17(f.threshold));
        cfg.set("eval.threshold", fmt17(f.threshold));
    }
    if (*f.o_alpha) cfg.set("network.alpha", fmt17(f.alpha));
    if (*f.o_form) cfg.set("network.sigma_form", f.sigma_form);
    if (*f.o_reduce) cfg.set("network.reduce", f.reduce);
    if (*f.o_eca) cfg.set("network.eca", f.eca);
    if (*f.o_spatial) cfg.set("network.spatial", f.spatial);
    if (*f.o_reg) cfg.set("network.reg_weight", fmt17(f.reg_weight));
    if (*f.o_multiscale) cfg.set("network.multiscale", f.multiscale);
    return cfg;
}

std::filesystem::path ensure_out_dir(const Flags& f) {
    std::filesystem::path dir(f.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw_io("cannot create output directory " + dir.string() + ": " +
                     ec.message());
    return dir;
}

void write_run_descriptor(const std::filesystem::path& dir, const std::string& command,
                          const Flags& f, const Config& cfg) {
    nlohmann::json doc;
    doc["command"] = command;
    doc["seed"] = f.seed;
    doc["version"] = kVersion;
    doc["config"] = cfg.values();
    std::ofstream out(dir / "run.json");
    if (!out) throw_io("cannot write run descriptor in " + dir.string());
    out << doc.dump(2) << "\n";
}

std::vector<Sample> load_split(const DatasetManifest& manifest, Split split) {
    std::vector<Sample> out;
    for (const auto& entry : manifest.with_split(split)) out.push_back(load_pair(entry));
    return out;
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw_parameter("split: expected train|val|test, got '" + name + "'");
}

struct SplitScores {
    std::vector<TensorPtr> scores;
    std::vector<TensorPtr> masks;
    std::vector<SignificanceMap> fused;
};

SplitScores score_split(Network& net, const std::vector<Sample>& samples,
                        bool keep_fused) {
    SplitScores out;
    for (const auto& s : samples) {
        auto r = net.forward(s.image, false);
        out.scores.push_back(r.scores);
        out.masks.push_back(s.mask);
        if (keep_fused) out.fused.push_back(r.fused);
    }
    return out;
}

// ---------------------------------------------------------------------------
// commands

int cmd_generate(const Flags& f) {
    Config cfg = effective_config(f);
    RunSettings s = settings_from_config(cfg);
    s.data.seed = f.seed;
    const auto dir = ensure_out_dir(f);
    const auto manifest = generate_dataset(s.data, dir.string());
    write_run_descriptor(dir, "generate", f, cfg);
    long train_n = manifest.with_split(Split::Train).size();
    long val_n = manifest.with_split(Split::Val).size();
    long test_n = manifest.with_split(Split::Test).size();
    std::cout << "generated " << manifest.entries.size() << " images ("
              << train_n << " train, " << val_n << " val, " << test_n
              << " test) under " << dir.string() << "\n";
    std::cout << "manifest: " << (dir / "manifest.json").string() << "\n";
    return 0;
}

int cmd_train(const Flags& f, const std::string& manifest_path) {
    Config cfg = effective_config(f);
    RunSettings s = settings_from_config(cfg);
    const auto dir = ensure_out_dir(f);
    const auto manifest = load_manifest(manifest_path);
    auto train_set = load_split(manifest, Split::Train);
    auto val_set = load_split(manifest, Split::Val);

    const unsigned long long net_seed = derive_seed(f.seed, kNetStream);
    Network net(s.network, net_seed);
    s.train.seed = f.seed;
    AdagradState opt;
    const auto result = train(net, train_set, val_set, s.train, opt);

    const auto ckpt = dir / "checkpoint.dnfa";
    save_checkpoint(ckpt.string(), net,
                    CheckpointMeta{s.train.epochs, net_seed, result.best_val_f1},
                    &opt.acc);
    write_training_log((dir / "train_log.csv").string(), result);
    write_run_descriptor(dir, "train", f, cfg);
    std::cout << "trained " << s.train.epochs << " epochs on " << train_set.size()
              << " images; best val F1 " << result.best_val_f1 << " at epoch "
              << result.best_epoch << "\n";
    std::cout << "checkpoint: " << ckpt.string() << "\n";
    return 0;
}

int cmd_infer(const Flags& f, const std::string& checkpoint_path,
              const std::vector<std::string>& inputs, bool dump_significance) {
    const auto dir = ensure_out_dir(f);
    auto loaded = load_checkpoint(checkpoint_path);
    Network& net = *loaded.network;
    if (dump_significance && loaded.spec.head != HeadKind::Nfa)
        throw_parameter("significance dumps need an NFA-head checkpoint");

    for (const auto& input : inputs) {
        auto image = load_image(input);
        auto result = net.forward(image, false);
        const std::string stem = std::filesystem::path(input).stem().string();
        const auto scores_path = dir / (stem + "_scores.png");
        save_scores(scores_path.string(), result.scores);
        std::cout << input << " -> " << scores_path.string();
        if (dump_significance) {
            const auto raw_path = dir / (stem + "_significance.raw");
            write_raw_map(raw_path.string(), result.fused.values);
            std::cout << " + " << raw_path.string();
        }
        std::cout << "\n";
    }
    return 0;
}

int cmd_eval(const Flags& f, const std::string& checkpoint_path,
             const std::string& manifest_path, const std::string& split_name,
             const std::string& scores_dir) {
    Config cfg = effective_config(f);
    RunSettings s = settings_from_config(cfg);
    const auto dir = ensure_out_dir(f);
    if (checkpoint_path.empty() == scores_dir.empty())
        throw_parameter("eval needs exactly one of: a checkpoint, or --scores-dir");
    const auto manifest = load_manifest(manifest_path);
    const auto entries = manifest.with_split(parse_split(split_name));
    if (entries.empty()) throw_parameter("eval: split '" + split_name + "' is empty");

    SplitScores scored;
    if (!checkpoint_path.empty()) {
        auto loaded = load_checkpoint(checkpoint_path);
        std::vector<Sample> samples;
        for (const auto& entry : entries) samples.push_back(load_pair(entry));
        scored = score_split(*loaded.network, samples, false);
    } else {
        // pre-computed per-image score maps named like infer's outputs
        for (const auto& entry : entries) {
            const std::string stem = std::filesystem::path(entry.image).stem().string();
            const auto path =
                std::filesystem::path(scores_dir) / (stem + "_scores.png");
            scored.scores.push_back(load_image(path.string()));
            scored.masks.push_back(load_mask(entry.mask));
            if (!(scored.scores.back()->shape == scored.masks.back()->shape))
                throw_format("score map dims differ from mask for " + entry.image);
        }
    }
    const auto report = evaluate_dataset(scored.scores, scored.masks, s.eval.threshold,
                                         s.eval.iou_min, s.eval.tolerance_px);
    auto doc = report_to_json(report);
    doc["split"] = split_name;
    doc["checkpoint"] = checkpoint_path;
    doc["fragmentation"] =
        fragmentation(scored.scores, scored.masks, s.eval.threshold);
    const auto report_path = dir / "report.json";
    {
        std::ofstream out(report_path);
        if (!out) throw_io("cannot write report: " + report_path.string());
        out << doc.dump(2) << "\n";
    }
    write_run_descriptor(dir, "eval", f, cfg);
    std::cout << "object F1 " << report.object.f1 << ", AP " << report.object_ap
              << ", FA/image " << report.object.fa_per_image << ", pixel F1 "
              << report.pixel.f1 << "\n";
    std::cout << "report: " << report_path.string() << "\n";
    return 0;
}

int cmd_ablate(const Flags& f, const std::string& manifest_path) {
    Config cfg = effective_config(f);
    RunSettings s = settings_from_config(cfg);
    const auto dir = ensure_out_dir(f);
    const auto manifest = load_manifest(manifest_path);
    auto train_set = load_split(manifest, Split::Train);
    auto val_set = load_split(manifest, Split::Val);
    auto test_set = load_split(manifest, Split::Test);
    if (test_set.empty()) throw_parameter("ablate: test split is empty");

    using CF = CovarianceForm;
    std::vector<CF> forms = *f.o_form
                                ? std::vector<CF>{s.network.form}
                                : std::vector<CF>{CF::Spherical,
                                                  CF::IndependentElliptical,
                                                  CF::DenseElliptical};
    std::vector<bool> multis = *f.o_multiscale ? std::vector<bool>{s.network.multiscale}
                                               : std::vector<bool>{true, false};
    std::vector<bool> ecas = *f.o_eca ? std::vector<bool>{s.network.use_eca}
                                      : std::vector<bool>{true, false};
    std::vector<double> regs =
        *f.o_reg ? std::vector<double>{s.network.reg_weight}
                 : std::vector<double>{s.network.reg_weight, 0.0};
    std::vector<double> alphas = *f.o_alpha ? std::vector<double>{s.network.alpha}
                                            : std::vector<double>{1e-4, 5e-4, 1e-3};

    // "High" is relative to the operating point: maps are rebinarized at twice
    // the eval threshold to expose fragmentation near the score peaks.
    const double high_threshold = std::min(0.95, 2.0 * s.eval.threshold);
    std::string csv =
        "form,multiscale,eca,regularizer,alpha,object_precision,object_recall,"
        "object_f1,object_ap,fa_per_image,pixel_f1,fragmentation,fragmentation_high\n";
    const long total = static_cast<long>(forms.size() * multis.size() * ecas.size() *
                                         regs.size() * alphas.size());
    long done = 0;
    for (CF form : forms)
        for (bool multi : multis)
            for (bool eca : ecas)
                for (double reg : regs)
                    for (double alpha : alphas) {
                        NetworkSpec spec = s.network;
                        spec.form = form;
                        spec.multiscale = multi;
                        spec.use_eca = eca;
                        spec.reg_weight = reg;
                        spec.alpha = alpha;

                        Network net(spec, derive_seed(f.seed, kNetStream));
                        TrainConfig tc = s.train;
                        tc.seed = f.seed;
                        AdagradState opt;
                        train(net, train_set, val_set, tc, opt);

                        auto scored = score_split(net, test_set, false);
                        const auto object =
                            object_metrics(scored.scores, scored.masks,
                                           s.eval.threshold, s.eval.iou_min);
                        const double ap = object_average_precision(
                            scored.scores, scored.masks, s.eval.iou_min);
                        const auto pixel =
                            pixel_metrics(scored.scores, scored.masks,
                                          s.eval.threshold, s.eval.tolerance_px);
                        const double frag = fragmentation(
                            scored.scores, scored.masks, s.eval.threshold);
                        const double frag_high = fragmentation(
                            scored.scores, scored.masks, high_threshold);

                        csv += detail::sigma_form_name(form);
                        csv += multi ? ",on" : ",off";
                        csv += eca ? ",on" : ",off";
                        csv += "," + fmt17(reg) + "," + fmt17(alpha);
                        csv += "," + fmt17(object.precision) + "," +
                               fmt17(object.recall) + "," + fmt17(object.f1) + "," +
                               fmt17(ap) + "," + fmt17(object.fa_per_image) + "," +
                               fmt17(pixel.f1) + "," + fmt17(frag) + "," +
                               fmt17(frag_high) + "\n";
                        ++done;
                        std::cout << "[" << done << "/" << total << "] "
                                  << detail::sigma_form_name(form)
                                  << " multiscale=" << (multi ? "on" : "off")
                                  << " eca=" << (eca ? "on" : "off") << " reg=" << reg
                                  << " alpha=" << alpha << " F1=" << object.f1
                                  << " AP=" << ap << "\n";
                    }

    const auto csv_path = dir / "ablation.csv";
    {
        std::ofstream out(csv_path);
        if (!out) throw_io("cannot write ablation table: " + csv_path.string());
        out << csv;
    }
    write_run_descriptor(dir, "ablate", f, cfg);
    std::cout << "ablation table: " << csv_path.string() << "\n";
    return 0;
}

int cmd_calibrate(const Flags& f, const std::string& checkpoint_path,
                  const std::string& manifest_path, const std::string& split_name) {
    Config cfg = effective_config(f);
    RunSettings s = settings_from_config(cfg);
    const auto dir = ensure_out_dir(f);
    auto loaded = load_checkpoint(checkpoint_path);
    if (loaded.spec.head != HeadKind::Nfa)
        throw_parameter("calibrate needs an NFA-head checkpoint");
    const auto samples = load_split(load_manifest(manifest_path), parse_split(split_name));
    if (samples.empty())
        throw_parameter("calibrate: split '" + split_name + "' is empty");

    const double alpha = *f.o_alpha ? f.alpha : loaded.spec.alpha;
    auto scored = score_split(*loaded.network, samples, true);
    const auto scores = recalibrated_scores(scored.fused, alpha);
    const auto report = calibration_report(scores, scored.masks, s.eval.bins);

    nlohmann::json doc;
    doc["alpha"] = alpha;
    doc["extreme_fraction"] = report.extreme_fraction;
    doc["occupied_positive_bins"] = report.occupied_positive_bins;
    for (const auto& bin : report.bins)
        doc["bins"].push_back({{"lo", bin.lo},
                               {"hi", bin.hi},
                               {"positives", bin.positives},
                               {"negatives", bin.negatives},
                               {"frequency", bin.frequency}});
    const auto path = dir / "calibration.json";
    {
        std::ofstream out(path);
        if (!out) throw_io("cannot write calibration report: " + path.string());
        out << doc.dump(2) << "\n";
    }
    write_run_descriptor(dir, "calibrate", f, cfg);
    std::cout << "alpha " << alpha << ": extreme fraction " << report.extreme_fraction
              << ", occupied positive bins " << report.occupied_positive_bins << "\n";
    std::cout << "calibration: " << path.string() << "\n";
    return 0;
}

int cmd_nfa_curve(const Flags& f) {
    Config cfg = effective_config(f);
    RunSettings s = settings_from_config(cfg);
    const auto dir = ensure_out_dir(f);
    const auto rows = significance_curve(s.curve.x_min, s.curve.x_max, s.curve.steps,
                                         s.curve.k, s.curve.n_test);
    const auto path = dir / "nfa_curve.csv";
    write_curve_csv(path.string(), rows);
    write_run_descriptor(dir, "nfa-curve", f, cfg);
    std::cout << "curve (" << rows.size() << " rows, k=" << s.curve.k
              << "): " << path.string() << "\n";
    return 0;
}

int cmd_check(const Flags& f) {
    bool ok = true;
    const auto report = run_gradient_checks(f.seed);
    for (const auto& row : report.rows) {
        std::printf("gradcheck  %-36s max_err=%-12.3e tol=%-8.0e %s\n",
                    row.name.c_str(), row.max_error, row.tolerance,
                    row.pass ? "PASS" : "FAIL");
        ok = ok && row.pass;
    }
    const auto eps_rows = epsilon_meaningfulness_check(
        4, 64, 64, {1.0, 10.0}, 200, derive_seed(f.seed, 0x657073ULL));
    for (const auto& row : eps_rows) {
        const double bound = row.epsilon + 3.0 * row.std_error;
        const bool pass = row.mean_count <= bound;
        std::printf("epsilon    eps=%-8.3g mean=%-10.4f bound=%-10.4f %s\n",
                    row.epsilon, row.mean_count, bound, pass ? "PASS" : "FAIL");
        ok = ok && pass;
    }
    std::cout << (ok ? "all checks passed" : "CHECK FAILURES") << "\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"small-object segmentation with statistically calibrated scores"};
    app.require_subcommand(1);

    Flags generate_f, train_f, infer_f, eval_f, ablate_f, calibrate_f, curve_f,
        check_f;
    std::string train_manifest, infer_checkpoint, eval_checkpoint, eval_manifest,
        eval_scores_dir, ablate_manifest, calibrate_checkpoint, calibrate_manifest;
    std::vector<std::string> infer_inputs;
    bool infer_significance = false;
    std::string eval_split = "test", calibrate_split = "test";

    auto* c_generate = app.add_subcommand("generate", "write a synthetic dataset");
    add_common(c_generate, generate_f);

    auto* c_train = app.add_subcommand("train", "train a model on a dataset");
    add_common(c_train, train_f);
    c_train->add_option("manifest", train_manifest, "dataset manifest")->required();

    auto* c_infer = app.add_subcommand("infer", "score images with a checkpoint");
    add_common(c_infer, infer_f);
    c_infer->add_option("checkpoint", infer_checkpoint, "model checkpoint")->required();
    c_infer->add_option("images", infer_inputs, "input images")->required();
    c_infer->add_flag("--significance", infer_significance,
                      "also dump raw fused significance maps");

    auto* c_eval = app.add_subcommand("eval", "evaluate predictions on a dataset");
    add_common(c_eval, eval_f);
    c_eval->add_option("manifest", eval_manifest, "dataset manifest")->required();
    c_eval->add_option("--checkpoint", eval_checkpoint, "model checkpoint to score with");
    c_eval->add_option("--scores-dir", eval_scores_dir,
                       "directory of precomputed <stem>_scores.png maps");
    c_eval->add_option("--split", eval_split, "train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));

    auto* c_ablate = app.add_subcommand("ablate", "run the ablation matrix");
    add_common(c_ablate, ablate_f);
    c_ablate->add_option("manifest", ablate_manifest, "dataset manifest")->required();

    auto* c_calibrate =
        app.add_subcommand("calibrate", "rescore significance with a new alpha");
    add_common(c_calibrate, calibrate_f);
    c_calibrate->add_option("checkpoint", calibrate_checkpoint, "model checkpoint")
        ->required();
    c_calibrate->add_option("manifest", calibrate_manifest, "dataset manifest")
        ->required();
    c_calibrate->add_option("--split", calibrate_split, "train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));

    auto* c_curve =
        app.add_subcommand("nfa-curve", "tabulate significance against distance");
    add_common(c_curve, curve_f);

    auto* c_check = app.add_subcommand("check", "run the property suites");
    add_common(c_check, check_f);

    try {
        app.parse(argc, argv);
        if (c_generate->parsed()) return cmd_generate(generate_f);
        if (c_train->parsed()) return cmd_train(train_f, train_manifest);
        if (c_infer->parsed())
            return cmd_infer(infer_f, infer_checkpoint, infer_inputs,
                             infer_significance);
        if (c_eval->parsed())
            return cmd_eval(eval_f, eval_checkpoint, eval_manifest, eval_split,
                            eval_scores_dir);
        if (c_ablate->parsed()) return cmd_ablate(ablate_f, ablate_manifest);
        if (c_calibrate->parsed())
            return cmd_calibrate(calibrate_f, calibrate_checkpoint,
                                 calibrate_manifest, calibrate_split);
        if (c_curve->parsed()) return cmd_nfa_curve(curve_f);
        if (c_check->parsed()) return cmd_check(check_f);
        std::cerr << "error: parameter_error: no command given\n";
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage_error: " << one_line(e.what()) << "\n";
        return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
    } catch (const nfaseg::Error& e) {
        std::cerr << "error: " << error_code_name(e.code()) << ": "
                  << one_line(e.what()) << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: internal_error: " << one_line(e.what()) << "\n";
        return 10;
    }
}
