#include "mhmamba_cli/commands.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mhmamba/data_io.hpp"
#include "mhmamba/errors.hpp"
#include "mhmamba/metrics.hpp"
#include "mhmamba/network.hpp"
#include "mhmamba/training.hpp"
#include "mhmamba_cli/config.hpp"
#include "mhmamba_cli/suites.hpp"

#ifndef MHM_VERSION
#define MHM_VERSION "unknown"
#endif

namespace mhm::cli {

const char* version() { return MHM_VERSION; }

namespace {

namespace fs = std::filesystem;

struct Context {
    ConfigMap config;
    fs::path out_dir;
    std::vector<std::string> outputs;
    std::ostream& out;
    std::ostream& err;

    std::uint64_t seed() const { return config.get_u64("run.seed"); }

    fs::path output(const std::string& name) {
        outputs.push_back(name);
        return out_dir / name;
    }

    void write_text(const std::string& name, const std::string& text) {
        std::ofstream os(output(name), std::ios::binary);
        os << text;
        if (!os) throw IoError(IoError::Code::Open, "cannot write " + (out_dir / name).string());
    }

    // Resolved config, seed, version and outputs: enough to repeat the run.
    void write_manifest(const std::string& command) const {
        nlohmann::ordered_json j;
        j["command"] = command;
        j["version"] = version();
        j["seed"] = seed();
        j["deterministic"] = config.get_bool("run.deterministic");
        j["config"] = config.entries();
        j["outputs"] = outputs;
        std::ofstream os(out_dir / (command + ".manifest.json"), std::ios::binary);
        os << j.dump(2) << '\n';
        if (!os) throw IoError(IoError::Code::Open, "cannot write manifest in " + out_dir.string());
    }
};

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string scientific(double v) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << v;
    return os.str();
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(Context& ctx) {
    std::vector<std::string> scopes = ctx.config.get_list("gradcheck.scope");
    if (scopes.size() == 1 && scopes[0] == "all") scopes = gradcheck_scopes();
    if (scopes.empty()) throw UsageError("gradcheck: no scope given");
    const std::int64_t size = ctx.config.get_int("gradcheck.size");
    for (const auto& s : scopes) {
        if (std::find(gradcheck_scopes().begin(), gradcheck_scopes().end(), s) == gradcheck_scopes().end()) {
            throw UsageError("unknown gradcheck scope '" + s + "'");
        }
    }
    std::ostringstream table;
    table << "scope,max_relative_error,compared,skipped,seconds,status\n";
    ctx.out << "scope,max_relative_error,compared,skipped,seconds,status\n";
    bool ok = true;
    for (const auto& s : scopes) {
        const auto r = run_gradcheck(s, size, ctx.seed());
        ok = ok && r.passed();
        std::ostringstream row;
        row << r.scope << ',' << scientific(r.max_relative_error) << ',' << r.coordinates << ',' << r.skipped << ','
            << fixed(r.seconds, 2) << ',' << (r.passed() ? "pass" : "FAIL") << '\n';
        table << row.str();
        ctx.out << row.str() << std::flush;
    }
    ctx.write_text("gradcheck.csv", table.str());
    ctx.write_manifest("gradcheck");
    return ok ? kExitOk : kExitFailure;
}

int cmd_bench(Context& ctx) {
    const std::string component = ctx.config.get("bench.component");
    const auto rows = run_bench(component, ctx.config.get_int_list("bench.sizes"),
                                static_cast<int>(ctx.config.get_int("bench.repeats")), ctx.seed());
    std::ostringstream table;
    table << "size,tokens,ms,ratio\n";
    for (const auto& r : rows) {
        table << r.size << ',' << r.tokens << ',' << fixed(r.ms, 3) << ',' << (r.ratio ? fixed(*r.ratio, 3) : "")
              << '\n';
    }
    ctx.out << table.str();
    ctx.write_text("bench_" + component + ".csv", table.str());
    ctx.write_manifest("bench");
    return kExitOk;
}

int cmd_phantom(Context& ctx) {
    const std::int64_t count = ctx.config.get_int("phantom.count");
    if (count < 1) throw UsageError("phantom.count must be at least 1");
    const auto dims = ctx.config.get_dims("phantom.dims");
    const double noise = ctx.config.get_double("phantom.noise");
    const std::string prefix = ctx.config.get("phantom.prefix");
    for (std::int64_t i = 0; i < count; ++i) {
        io::PhantomSpec spec;
        try {
            spec = io::random_phantom_spec(ctx.seed() + static_cast<std::uint64_t>(i), dims);
            spec.noise = noise;
            spec.validate();
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        const auto ph = io::generate_phantom(spec);
        const std::string stem = prefix + std::to_string(i);
        io::write_volume(ctx.output(stem + "_img.json"), ph.image, io::kModalities);
        ctx.outputs.push_back(stem + "_img.raw");
        io::write_labels(ctx.output(stem + "_seg.json"), ph.labels);
        ctx.outputs.push_back(stem + "_seg.raw");
        ctx.out << (ctx.out_dir / stem).string() << '\n';
    }
    ctx.write_manifest("phantom");
    return kExitOk;
}

template <typename T>
int train_as(Context& ctx, const NetworkConfig& net_cfg) {
    const auto cases = ctx.config.get_list("data.cases");
    if (cases.empty()) throw UsageError("train: data.cases lists no cases");
    std::vector<train::Case<T>> data;
    for (const auto& stem : cases) {
        data.push_back({io::read_volume<T>(stem + "_img"), io::read_labels(stem + "_seg")});
    }
    const train::TrainConfig tc = ctx.config.training();
    MhMambaNet<T> net(net_cfg, ctx.seed());
    std::string log = train::loss_log_header() + "\n";
    ctx.out << train::loss_log_header() << '\n';
    train::train(net, data, tc, [&](const train::EpochRecord& r) {
        const std::string line = train::format_log_line(r);
        log += line + "\n";
        ctx.out << line << '\n' << std::flush;
    });
    ctx.write_text("loss_log.csv", log);
    save_checkpoint(ctx.output("model.ckpt"), net);
    ctx.write_manifest("train");
    return kExitOk;
}

int cmd_train(Context& ctx) {
    const NetworkConfig cfg = ctx.config.network();
    return cfg.precision == Precision::F64 ? train_as<double>(ctx, cfg) : train_as<float>(ctx, cfg);
}

template <typename T>
int infer_as(Context& ctx, const fs::path& checkpoint) {
    const MhMambaNet<T> net = load_checkpoint<T>(checkpoint);
    const double overlap = ctx.config.get_double("infer.overlap");
    const auto inputs = ctx.config.get_list("infer.inputs");
    if (inputs.empty()) throw UsageError("infer: infer.inputs lists no cases");
    for (const auto& stem : inputs) {
        const auto image = io::read_volume<T>(stem + "_img");
        io::SlidingWindowResult<T> r;
        try {
            r = io::sliding_window_infer<T>([&](const Volume5<T>& x) { return net.infer(x); }, image,
                                            net.config().patch, overlap);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        const std::string name = fs::path(stem).filename().string() + "_pred";
        io::write_labels(ctx.output(name + ".json"), r.labels);
        ctx.outputs.push_back(name + ".raw");
        ctx.out << (ctx.out_dir / name).string() << '\n';
    }
    ctx.write_manifest("infer");
    return kExitOk;
}

int cmd_infer(Context& ctx) {
    const std::string ckpt = ctx.config.get("infer.checkpoint");
    if (ckpt.empty()) throw UsageError("infer: infer.checkpoint is not set");
    return read_checkpoint_config(ckpt).precision == Precision::F64 ? infer_as<double>(ctx, ckpt)
                                                                      : infer_as<float>(ctx, ckpt);
}

int cmd_eval(Context& ctx) {
    const auto pred = ctx.config.get_list("eval.pred");
    const auto gt = ctx.config.get_list("eval.gt");
    if (pred.empty() || pred.size() != gt.size()) {
        throw UsageError("eval: eval.pred and eval.gt must list the same positive number of label files");
    }
    std::vector<double> sp;
    for (const auto& s : ctx.config.get_list("eval.spacing")) {
        try {
            sp.push_back(std::stod(s));
        } catch (const std::logic_error&) {
            throw UsageError("eval.spacing: cannot parse '" + s + "'");
        }
    }
    if (sp.size() != 3) throw UsageError("eval.spacing needs three values");
    const metrics::Spacing spacing{sp[0], sp[1], sp[2]};
    std::vector<metrics::MetricsReport> reports;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        reports.push_back(metrics::evaluate(io::read_labels(pred[i]), io::read_labels(gt[i]), 0, spacing));
    }
    const std::string csv = metrics::average(reports).csv();
    ctx.out << csv;
    ctx.write_text("metrics.csv", csv);
    ctx.write_manifest("eval");
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct Flags {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
    std::optional<std::string> out;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"MHMamba 3D segmentation: gradient checks, benchmarks, training, inference, evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(version()));

    Flags flags;
    struct Sugar {
        const char* flag;
        const char* key;
        const char* help;
    };
    const std::vector<std::pair<std::string, std::vector<Sugar>>> commands{
        {"gradcheck",
         {{"--scope", "gradcheck.scope", "op name, module, 'network' or 'all' (comma-separated)"},
          {"--size", "gradcheck.size", "cube extent of the network input"}}},
        {"bench",
         {{"--component", "bench.component", "scan, block, encoder or network"},
          {"--sizes", "bench.sizes", "comma-separated sizes (tokens for scan, cube extents otherwise)"},
          {"--repeats", "bench.repeats", "timed repetitions per size (best is reported)"}}},
        {"train", {{"--cases", "data.cases", "comma-separated case stems (<stem>_img, <stem>_seg)"}}},
        {"infer",
         {{"--checkpoint", "infer.checkpoint", "checkpoint written by train"},
          {"--inputs", "infer.inputs", "comma-separated case stems"},
          {"--overlap", "infer.overlap", "sliding-window overlap in [0, 0.9]"}}},
        {"eval",
         {{"--pred", "eval.pred", "comma-separated predicted label files"},
          {"--gt", "eval.gt", "comma-separated reference label files"}}},
        {"phantom",
         {{"--count", "phantom.count", "number of phantoms"},
          {"--dims", "phantom.dims", "D,H,W"}}},
    };
    const std::map<std::string, std::string> descriptions{
        {"gradcheck", "finite-difference gradient checks at 64-bit"},
        {"bench", "wall-clock scaling table with doubling ratios"},
        {"train", "train on phantom or volume-file cases"},
        {"infer", "sliding-window inference from a checkpoint"},
        {"eval", "Dice and HD95 for WT, TC and ET"},
        {"phantom", "write synthetic multimodal phantoms"},
    };

    std::map<std::string, std::map<std::string, std::string>> sugar_values;
    for (const auto& [name, sugars] : commands) {
        CLI::App* sub = app.add_subcommand(name, descriptions.at(name));
        sub->add_option("-c,--config", flags.config_file, "key = value config file");
        sub->add_option("--set", flags.overrides, "override one config key (key=value), repeatable");
        sub->add_option("--seed", flags.seed, "global seed (run.seed)");
        sub->add_flag("--deterministic", flags.deterministic, "record determinism mode (runs are always single-threaded)");
        sub->add_option("-o,--out", flags.out, "output directory (run.out)");
        for (const auto& s : sugars) sub->add_option(s.flag, sugar_values[name][s.key], s.help);
    }

    std::vector<const char*> argv{"mhmamba"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    const CLI::App* chosen = app.get_subcommands().front();
    const std::string command = chosen->get_name();
    Context ctx{ConfigMap{}, {}, {}, out, err};
    try {
        if (!flags.config_file.empty()) ctx.config.merge_file(flags.config_file);
        for (const auto& o : flags.overrides) ctx.config.set_override(o);
        for (const auto& s : commands) {
            if (s.first != command) continue;
            for (const auto& sugar : s.second) {
                if (chosen->count(sugar.flag) > 0) ctx.config.set(sugar.key, sugar_values[command][sugar.key]);
            }
        }
        if (flags.seed) ctx.config.set("run.seed", std::to_string(*flags.seed));
        if (flags.deterministic) ctx.config.set("run.deterministic", "true");
        if (flags.out) ctx.config.set("run.out", *flags.out);
        ctx.config.get_u64("run.seed");

        ctx.out_dir = ctx.config.get("run.out");
        fs::create_directories(ctx.out_dir);

        if (command == "gradcheck") return cmd_gradcheck(ctx);
        if (command == "bench") return cmd_bench(ctx);
        if (command == "train") return cmd_train(ctx);
        if (command == "infer") return cmd_infer(ctx);
        if (command == "eval") return cmd_eval(ctx);
        return cmd_phantom(ctx);
    } catch (const UsageError& e) {
        err << "mhmamba " << command << ": " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "mhmamba " << command << ": config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const IoError& e) {
        err << "mhmamba " << command << ": " << e.what() << '\n';
        return kExitUsage;
    } catch (const ShapeError& e) {
        err << "mhmamba " << command << ": shape error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "mhmamba " << command << ": " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "mhmamba " << command << ": numeric error: " << e.what() << '\n';
        return kExitFailure;
    } catch (const std::exception& e) {
        err << "mhmamba " << command << ": " << e.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace mhm::cli
