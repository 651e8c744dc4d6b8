#include "miadapt/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "miadapt/adapt.hpp"
#include "miadapt/catalign.hpp"
#include "miadapt/datamodel.hpp"
#include "miadapt/detector.hpp"
#include "miadapt/eval.hpp"
#include "miadapt/raug.hpp"
#include "miadapt/synthgen.hpp"
#include "miadapt/train.hpp"

namespace miadapt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.3.0";

/// Raised for bad input from the user (exit code 1).
class UserError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

json read_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw UserError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw UserError("config " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UserError("config " + path + " must be a flat JSON object");
    return j;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw UserError("cannot write " + path.string());
        out << text;
    }
    fs::rename(tmp, path);
}

/// Records what a run did; written once the command has succeeded.
struct RunManifest {
    std::string command;
    json config = json::object();
    std::uint64_t seed = 0;
    json inputs = json::object();
    json outputs = json::object();
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void write(const fs::path& path) const {
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const json doc = {{"command", command}, {"config", config},   {"seed", seed},
                          {"inputs", inputs},   {"outputs", outputs}, {"toolkit_version", kToolVersion},
                          {"wall_clock_seconds", seconds}};
        write_text_atomic(path, doc.dump(2) + "\n");
    }
};

fs::path sidecar(const fs::path& file, const std::string& suffix) { return fs::path(file.string() + suffix); }

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UserError("bad seed '" + item + "' in --seeds");
        }
    }
    if (seeds.empty()) throw UserError("--seeds needs at least one value");
    return seeds;
}

std::string substitute_seed(std::string pattern, const std::string& value) {
    const std::string key = "{seed}";
    for (auto pos = pattern.find(key); pos != std::string::npos; pos = pattern.find(key))
        pattern.replace(pos, key.size(), value);
    return pattern;
}

std::string substitute_seed(const std::string& pattern, std::uint64_t seed) {
    return substitute_seed(pattern, std::to_string(seed));
}

// ---------------------------------------------------------------------------

struct GenSynthArgs {
    std::string config, out;
    std::uint64_t seed = 0;
};

void cmd_gen_synth(const GenSynthArgs& a, const CLI::App& sub) {
    RunManifest m;
    m.command = "gen-synth";
    auto cfg = synth::SynthConfig::defaults();
    from_json(read_config(a.config), cfg);
    if (sub.count("--seed")) cfg.seed = a.seed;
    const auto splits = synth::generate(cfg);
    const fs::path out(a.out);
    save_dataset(splits.source_train, out / "source_train" / "manifest.json");
    save_dataset(splits.source_test, out / "source_test" / "manifest.json");
    save_dataset(splits.target_pool, out / "target_pool" / "manifest.json");
    save_dataset(splits.target_test, out / "target_test" / "manifest.json");
    to_json(m.config, cfg);
    m.seed = cfg.seed;
    m.inputs = {{"config", a.config}};
    m.outputs = {{"dir", a.out}};
    m.write(out / "run_manifest.json");
    std::cout << "wrote " << splits.source_train.images.size() << "/" << splits.source_test.images.size() << "/"
              << splits.target_pool.images.size() << "/" << splits.target_test.images.size()
              << " images (source train/test, target pool/test) to " << a.out << "\n";
}

struct TrainArgs {
    std::string config, out, data;
    std::uint64_t seed = 0;
    int steps = 0;
    double learning_rate = 0.0;
};

void cmd_train_source(const TrainArgs& a, const CLI::App& sub) {
    RunManifest m;
    m.command = "train-source";
    const json file_cfg = read_config(a.config);
    std::string data = a.data;
    if (data.empty()) data = file_cfg.value("data", std::string{});
    if (data.empty()) throw UserError("train-source needs --data or a 'data' key in the config");

    TrainConfig tc;
    from_json(file_cfg, tc);
    if (sub.count("--seed")) tc.seed = a.seed;
    if (sub.count("--steps")) tc.steps = a.steps;
    if (sub.count("--learning-rate")) tc.learning_rate = a.learning_rate;

    const auto dataset = load_dataset(data);
    DetectorConfig dc;
    from_json(file_cfg, dc);
    dc.classes = dataset.classes;
    dc.validate();

    std::ofstream log(sidecar(a.out, ".log.jsonl"));
    auto params = init_params(dc, tc.seed);
    params = train_detector(std::move(params), dataset, tc, [&](const StepRecord& r) {
        log << json{{"step", r.step},
                    {"lr", r.learning_rate},
                    {"rpn_cls", r.loss.rpn_cls},
                    {"rpn_loc", r.loss.rpn_loc},
                    {"roi_cls", r.loss.roi_cls},
                    {"roi_loc", r.loss.roi_loc},
                    {"total", r.loss.total}}
                   .dump()
            << '\n';
    });
    save_checkpoint(params, a.out);

    json resolved;
    to_json(resolved, tc);
    json det;
    to_json(det, dc);
    resolved.update(det);
    m.config = resolved;
    m.seed = tc.seed;
    m.inputs = {{"data", data}, {"config", a.config}};
    m.outputs = {{"checkpoint", a.out}, {"log", sidecar(a.out, ".log.jsonl").string()}};
    m.write(sidecar(a.out, ".run.json"));
    std::cout << "trained " << tc.steps << " steps, " << params.parameter_count() << " parameters -> " << a.out
              << "\n";
}

struct AugmentArgs {
    std::string data, out;
    int shots = 5;
    std::uint64_t seed = 0;
};

std::string count_table(const Dataset& before, const Dataset& after) {
    const auto hb = class_histogram(before);
    const auto ha = class_histogram(after);
    std::ostringstream os;
    char line[128];
    std::snprintf(line, sizeof(line), "%-4s %-16s %8s %8s\n", "id", "class", "before", "after");
    os << line;
    for (const auto& [c, n] : hb) {
        std::snprintf(line, sizeof(line), "%-4d %-16s %8zu %8zu\n", c,
                      before.classes[static_cast<std::size_t>(c - 1)].c_str(), n, ha.at(c));
        os << line;
    }
    return os.str();
}

void cmd_augment_preview(const AugmentArgs& a) {
    RunManifest m;
    m.command = "augment-preview";
    const auto d = load_dataset(a.data);
    const auto result = raug::apply_raug_with_plan(d, a.shots, a.seed);
    const fs::path out(a.out);
    save_dataset(result.dataset, out / "manifest.json");
    const auto table = count_table(d, result.dataset);
    write_text_atomic(out / "class_counts.txt", table);
    std::size_t pastes = 0;
    for (const auto& p : result.plans) pastes += p.pastes.size();
    m.config = {{"shots", a.shots}, {"rare_classes", raug::find_rare_classes(d, a.shots)}};
    m.seed = a.seed;
    m.inputs = {{"data", a.data}};
    m.outputs = {{"dir", a.out}, {"pastes", pastes}};
    m.write(out / "run_manifest.json");
    std::cout << table << pastes << " patches pasted\n";
}

struct AdaptArgs {
    std::string method, source_ckpt, target, config, out;
    int shots = 5;
    std::uint64_t seed = 0;
};

void cmd_adapt(const AdaptArgs& a, const CLI::App& sub) {
    RunManifest m;
    m.command = "adapt";
    const json file_cfg = read_config(a.config);
    const auto method = adapt::parse_method(a.method);
    auto cfg = adapt::AdaptConfig::for_method(method);
    adapt::from_json(file_cfg, cfg);
    cfg.method = method;
    if (!file_cfg.contains("use_raug")) cfg.use_raug = method == adapt::Method::MIAdapt;
    if (sub.count("--shots")) cfg.shots = a.shots;
    if (sub.count("--seed")) cfg.seed = a.seed;
    cfg.validate();

    const auto source = load_checkpoint(a.source_ckpt);
    const auto pool = load_dataset(a.target);
    const auto kshot = synth::select_kshot(pool, cfg.shots, cfg.seed);

    std::ofstream log(sidecar(a.out, ".log.jsonl"));
    const auto result = adapt::run_adaptation(source, kshot, cfg, [&](const adapt::LogRecord& r) {
        log << adapt::to_json(r).dump() << '\n';
    });
    save_checkpoint(result.model, a.out);

    json selected = json::array();
    for (const auto& li : kshot.images) selected.push_back(li.image.id);
    adapt::to_json(m.config, cfg);
    m.seed = cfg.seed;
    m.inputs = {{"source_ckpt", a.source_ckpt}, {"target", a.target}, {"config", a.config},
                {"kshot_images", selected}};
    m.outputs = {{"checkpoint", a.out}, {"log", sidecar(a.out, ".log.jsonl").string()},
                 {"steps", result.log.size()}};
    m.write(sidecar(a.out, ".run.json"));
    std::cout << adapt::method_name(method) << ": " << result.log.size() << " steps on " << kshot.images.size()
              << " target images -> " << a.out << "\n";
}

struct EvaluateArgs {
    std::string ckpt, data, seeds, report;
    double score_thresh = 0.01;
    double iou_thresh = 0.5;
};

void cmd_evaluate(const EvaluateArgs& a) {
    RunManifest m;
    m.command = "evaluate";
    const auto d = load_dataset(a.data);
    std::vector<std::uint64_t> seeds;
    if (!a.seeds.empty()) seeds = parse_seeds(a.seeds);

    std::vector<eval::EvalReport> reports;
    json runs = json::array();
    const std::size_t n_runs = seeds.empty() ? 1 : seeds.size();
    for (std::size_t i = 0; i < n_runs; ++i) {
        const std::string path = seeds.empty() ? a.ckpt : substitute_seed(a.ckpt, seeds[i]);
        const auto params = load_checkpoint(path);
        if (params.config.classes != d.classes) throw UserError("checkpoint classes differ from dataset classes");
        reports.push_back(eval::evaluate(params, d, a.score_thresh, a.iou_thresh));
        auto rj = eval::report_json(reports.back(), d.classes);
        rj["checkpoint"] = path;
        if (!seeds.empty()) rj["seed"] = seeds[i];
        runs.push_back(rj);
        if (!seeds.empty()) std::cout << "seed " << seeds[i] << " (" << path << ")\n";
        std::cout << eval::report_table(reports.back(), d.classes);
    }
    const auto agg = eval::aggregate_seeds(reports);
    char line[128];
    std::snprintf(line, sizeof(line), "mAP@0.5 mean %.2f +- %.2f over %zu run(s)\n", 100.0 * agg.mean,
                  100.0 * agg.std, agg.runs.size());
    std::cout << line;

    const fs::path report = a.report.empty() ? fs::path(substitute_seed(a.ckpt, "all") + ".eval.json") : fs::path(a.report);
    const json doc = {{"runs", runs}, {"mean", agg.mean}, {"std", agg.std}, {"map50", agg.runs}};
    write_text_atomic(report, doc.dump(2) + "\n");
    m.config = {{"score_thresh", a.score_thresh}, {"iou_thresh", a.iou_thresh}, {"seeds", seeds}};
    m.inputs = {{"ckpt", a.ckpt}, {"data", a.data}};
    m.outputs = {{"report", report.string()}};
    m.write(sidecar(report, ".run.json"));
}

struct InspectArgs {
    std::string ckpt, data, out;
    int n_r = 300;
    double iou_thresh = 0.5;
};

void cmd_inspect_bank(const InspectArgs& a) {
    RunManifest m;
    m.command = "inspect-bank";
    const auto params = load_checkpoint(a.ckpt);
    const auto d = load_dataset(a.data);
    catalign::ClassFeatureBank<double> bank;
    for (const auto& li : d.images) {
        const auto fm = forward_backbone(params, li.image);
        const auto proposals = catalign::mine_proposals(params, fm, a.n_r);
        const auto regions = catalign::assign_classes(proposals, li.annotations, a.iou_thresh);
        const auto image_bank = catalign::build_bank(fm, regions);
        for (const auto& [c, list] : image_bank.features())
            for (const auto& f : list) bank.add(c, f);
    }
    std::ostringstream os;
    char cell[64];
    os << "class            count\n";
    for (int c = 1; c <= d.num_classes(); ++c) {
        std::snprintf(cell, sizeof(cell), "%-16s %5zu\n", d.classes[static_cast<std::size_t>(c - 1)].c_str(),
                      bank.count(c));
        os << cell;
    }
    os << "\nclass-mean cosine\n" << std::string(16, ' ');
    for (int c = 1; c <= d.num_classes(); ++c) {
        std::snprintf(cell, sizeof(cell), " %8.8s", d.classes[static_cast<std::size_t>(c - 1)].c_str());
        os << cell;
    }
    os << '\n';
    for (int r = 1; r <= d.num_classes(); ++r) {
        std::snprintf(cell, sizeof(cell), "%-16s", d.classes[static_cast<std::size_t>(r - 1)].c_str());
        os << cell;
        for (int c = 1; c <= d.num_classes(); ++c) {
            if (bank.count(r) == 0 || bank.count(c) == 0) {
                os << "        -";
                continue;
            }
            const auto mr = bank.mean(r), mc = bank.mean(c);
            std::snprintf(cell, sizeof(cell), " %8.4f", mr.dot(mc) / (mr.norm() * mc.norm()));
            os << cell;
        }
        os << '\n';
    }
    std::cout << os.str();
    if (!a.out.empty()) {
        write_text_atomic(a.out, os.str());
        m.inputs = {{"ckpt", a.ckpt}, {"data", a.data}};
        m.config = {{"n_r", a.n_r}, {"iou_thresh", a.iou_thresh}};
        m.outputs = {{"table", a.out}};
        m.write(sidecar(a.out, ".run.json"));
    }
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"Source-free few-shot domain adaptation for microscopy-style detection", "miadapt"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    GenSynthArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-synth", "Render synthetic source/target datasets");
    gen_cmd->add_option("--config", gen.config, "Flat JSON SynthConfig (classes, split sizes, shift)");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--seed", gen.seed, "Overrides the config seed (default 0)");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train-source", "Train the reference detector on a labeled source set");
    train_cmd->add_option("--config", train.config,
                          "Flat JSON: learning_rate (0.02), steps (2000), seed, momentum, weight_decay, "
                          "anchor_size, anchor_ratios, rpn_pos_iou, rpn_neg_iou, roi_fg_iou, data");
    train_cmd->add_option("--data", train.data, "Source manifest");
    train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
    train_cmd->add_option("--seed", train.seed, "Run seed");
    train_cmd->add_option("--steps", train.steps, "Optimisation steps");
    train_cmd->add_option("--learning-rate", train.learning_rate, "Base learning rate");

    AugmentArgs aug;
    auto* aug_cmd = app.add_subcommand("augment-preview", "Apply rare-class copy-paste balancing and dump results");
    aug_cmd->add_option("--data", aug.data, "k-shot target manifest")->required();
    aug_cmd->add_option("--out", aug.out, "Output directory")->required();
    aug_cmd->add_option("--shots", aug.shots, "Shots per class");
    aug_cmd->add_option("--seed", aug.seed, "Run seed");

    AdaptArgs ad;
    auto* adapt_cmd = app.add_subcommand("adapt", "Adapt a source checkpoint with k labeled target images");
    adapt_cmd->add_option("--method", ad.method, "faster-freeshot | mt-freeshot | miadapt")
        ->required()
        ->check(CLI::IsMember({"faster-freeshot", "mt-freeshot", "miadapt"}));
    adapt_cmd->add_option("--source-ckpt", ad.source_ckpt, "Source checkpoint")->required();
    adapt_cmd->add_option("--target", ad.target, "Target manifest; the k-shot set is drawn from it")->required();
    adapt_cmd->add_option("--shots", ad.shots, "k (2 or 5)")->check(CLI::IsMember({2, 5}));
    adapt_cmd->add_option("--config", ad.config,
                          "Flat JSON: epochs (10), eta (0.9), n_r (300), alpha (1), beta (1), margin (1), "
                          "learning_rate (0.02), grad_clip (10), assign_iou (0.5), seed, use_raug");
    adapt_cmd->add_option("--out", ad.out, "Adapted checkpoint path")->required();
    adapt_cmd->add_option("--seed", ad.seed, "Run seed");

    EvaluateArgs ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "mAP@0.5 of a checkpoint on a dataset");
    eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint; '{seed}' is replaced per --seeds entry")->required();
    eval_cmd->add_option("--data", ev.data, "Evaluation manifest")->required();
    eval_cmd->add_option("--seeds", ev.seeds, "Comma-separated run seeds, e.g. 1,2,3");
    eval_cmd->add_option("--report", ev.report, "JSON report path (default <ckpt>.eval.json)");
    eval_cmd->add_option("--score-thresh", ev.score_thresh, "Detection score threshold");
    eval_cmd->add_option("--iou-thresh", ev.iou_thresh, "Match IoU threshold");

    InspectArgs ins;
    auto* ins_cmd = app.add_subcommand("inspect-bank", "Per-class proposal feature counts and class-mean cosines");
    ins_cmd->add_option("--ckpt", ins.ckpt, "Checkpoint")->required();
    ins_cmd->add_option("--data", ins.data, "Labeled manifest")->required();
    ins_cmd->add_option("--n-r", ins.n_r, "Proposals mined per image");
    ins_cmd->add_option("--out", ins.out, "Also write the table to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "miadapt: " << e.what() << " (run with --help for usage)\n";
        return 1;
    }

    try {
        if (*gen_cmd) cmd_gen_synth(gen, *gen_cmd);
        else if (*train_cmd) cmd_train_source(train, *train_cmd);
        else if (*aug_cmd) cmd_augment_preview(aug);
        else if (*adapt_cmd) cmd_adapt(ad, *adapt_cmd);
        else if (*eval_cmd) cmd_evaluate(ev);
        else if (*ins_cmd) cmd_inspect_bank(ins);
        return 0;
    } catch (const UserError& e) {
        std::cerr << "miadapt: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "miadapt: " << e.what() << "\n";
        return 1;
    } catch (const CheckpointError& e) {
        std::cerr << "miadapt: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "miadapt: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "miadapt: internal error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace miadapt::cli

namespace miadapt::cli {

int run(const std::vector<std::string>& args) {
    std::vector<std::string> storage;
    storage.reserve(args.size() + 1);
    storage.push_back("miadapt");
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace miadapt::cli
