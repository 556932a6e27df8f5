// Command-line front end: corpus synthesis, training, evaluation, detection
// and inspection dumps. Exit codes: 0 ok, 2 config, 3 data, 4 checkpoint.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gptr/synth.hpp"
#include "gptr/trainer.hpp"

namespace {

struct ConfigCli {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string dataset, checkpoint, output;
    long long seed = -1;    // -1: keep the config's value
    long long epochs = -1;
};

void add_config_options(CLI::App& cmd, ConfigCli& a, bool with_epochs = false) {
    cmd.add_option("--config", a.config_path, "config file of key = value lines");
    cmd.add_option("--set", a.overrides, "override one config field (key=value), repeatable");
    cmd.add_option("--dataset", a.dataset, "dataset JSON path");
    cmd.add_option("--checkpoint", a.checkpoint, "checkpoint path");
    cmd.add_option("--output", a.output, "output directory");
    cmd.add_option("--seed", a.seed, "run seed");
    if (with_epochs) cmd.add_option("--epochs", a.epochs, "training epochs");
}

// Precedence: config file, then --set overrides, then named flags.
gptr::RunConfig build_config(const ConfigCli& a) {
    gptr::RunConfig cfg;
    if (!a.config_path.empty()) {
        std::ifstream in(a.config_path, std::ios::binary);
        if (!in) throw gptr::ConfigError("config: cannot open '" + a.config_path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        gptr::parse_config_text(ss.str(), cfg);
    }
    for (const std::string& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw gptr::ConfigError("--set expects key=value, got '" + kv + "'");
        const std::string key(kv, 0, eq), value(kv, eq + 1);
        gptr::set_config_field(cfg, gptr::detail::trim(key), gptr::detail::trim(value));
    }
    if (!a.dataset.empty()) cfg.dataset = a.dataset;
    if (!a.checkpoint.empty()) cfg.checkpoint = a.checkpoint;
    if (!a.output.empty()) cfg.output = a.output;
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    if (a.epochs >= 0) cfg.epochs = static_cast<std::size_t>(a.epochs);
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"diagram object detection with gestalt grouping"};
    app.require_subcommand(1);

    std::string synth_out, synth_spec;
    std::uint64_t synth_seed = 0;
    std::size_t synth_count = 0, synth_offset = 0;
    CLI::App* synth = app.add_subcommand("synth", "render a synthetic diagram corpus");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count, "number of images")->required();
    synth->add_option("--seed", synth_seed, "corpus seed");
    synth->add_option("--offset", synth_offset,
                      "start index into the corpus stream; disjoint ranges extend one corpus");
    synth->add_option("--spec", synth_spec, "corpus spec file (defaults to the built-in shapes)");

    ConfigCli train_args;
    CLI::App* train = app.add_subcommand("train", "train a detector");
    add_config_options(*train, train_args, /*with_epochs=*/true);

    ConfigCli eval_args;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_config_options(*eval, eval_args);

    ConfigCli detect_args;
    std::string detect_image, detect_svg;
    double detect_threshold = 0.5;
    CLI::App* detect = app.add_subcommand("detect", "detect objects in one image");
    add_config_options(*detect, detect_args);
    detect->add_option("--image", detect_image, "input image")->required();
    detect->add_option("--threshold", detect_threshold, "keep detections scoring >= threshold");
    detect->add_option("--svg", detect_svg, "also write an SVG overlay here");

    ConfigCli inspect_args;
    std::string inspect_image, inspect_what;
    CLI::App* inspect =
        app.add_subcommand("inspect", "dump per-patch features or the grouping graph");
    add_config_options(*inspect, inspect_args);
    inspect->add_option("--image", inspect_image, "input image")->required();
    inspect->add_option("--what", inspect_what, "features | graph")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the parse error
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) {
            const gptr::SynthSpec spec = synth_spec.empty() ? gptr::default_synth_spec()
                                                            : gptr::load_synth_spec(synth_spec);
            const gptr::Dataset ds =
                gptr::synth_write_corpus(spec, synth_seed, synth_count, synth_offset, synth_out);
            std::printf("wrote %zu images and dataset.json to %s (%zu categories)\n",
                        ds.items.size(), synth_out.c_str(), ds.category_count());
        } else if (*train) {
            const gptr::RunConfig cfg = build_config(train_args);
            const gptr::TrainResult res = gptr::run_train(cfg, [](const gptr::EpochStat& st) {
                std::fprintf(stderr, "epoch %zu  loss %.4f  ap %.4f  ap50 %.4f\n", st.epoch,
                             st.train_loss, st.ap, st.ap50);
            });
            std::printf("checkpoint: %s\nlog: %s\nconfig: %s\n", res.checkpoint_path.c_str(),
                        res.log_path.c_str(), res.config_path.c_str());
        } else if (*eval) {
            const gptr::EvalResult res = gptr::run_eval(build_config(eval_args));
            std::cout << res.json.dump(1) << "\n";
        } else if (*detect) {
            const gptr::RunConfig cfg = build_config(detect_args);
            const gptr::DetectResult res =
                gptr::run_detect(cfg, detect_image, detect_threshold, !detect_svg.empty());
            if (!detect_svg.empty()) gptr::detail::write_text_file(detect_svg, res.svg);
            std::cout << res.json.dump(1) << "\n";
        } else if (*inspect) {
            const gptr::RunConfig cfg = build_config(inspect_args);
            std::cout << gptr::run_inspect(cfg, inspect_image, inspect_what).dump() << "\n";
        }
        return 0;
    } catch (const gptr::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const gptr::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const gptr::CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
